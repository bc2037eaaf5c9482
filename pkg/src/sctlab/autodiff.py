"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
walks the graph in reverse topological order and accumulates gradients.
Only the ops needed by the sequence models are provided, each with a
hand-derived backward rule.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block. Forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def _needs_grad(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into .grad for every reachable leaf.

        Intermediate gradients are freed as soon as they have been
        consumed, so peak memory is one forward pass plus the gradients
        currently in flight.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without explicit grad needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                if not node.requires_grad:
                    node.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # out-of-place add: incoming buffers may be views or shared between
    # parents, so they must never be mutated
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p._needs_grad() for p in parents):
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a._needs_grad():
            _accumulate(a, _unbroadcast(g, a.shape))
        if b._needs_grad():
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a._needs_grad():
            _accumulate(a, _unbroadcast(g, a.shape))
        if b._needs_grad():
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a._needs_grad():
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b._needs_grad():
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product. Operands must be at least 2-D; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a._needs_grad():
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b._needs_grad():
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x._needs_grad():
            _accumulate(x, g * (x.data > 0.0))

    return _make(data, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        if x._needs_grad():
            _accumulate(x, g * (1.0 - data * data))

    return _make(data, (x,), backward)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by row-max subtraction.

    -inf entries are legal and map to exactly 0.0 probability; NaN or
    +inf input raises. A row of all -inf cannot be normalised.
    """
    x = as_tensor(x)
    if np.isnan(x.data).any() or np.isposinf(x.data).any():
        raise NonFiniteError("softmax input contains NaN or +inf")
    rowmax = np.max(x.data, axis=-1, keepdims=True)
    if np.isneginf(rowmax).any():
        raise NonFiniteError("softmax row with every entry masked")
    shifted = x.data - rowmax
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x._needs_grad():
            dot = np.sum(g * data, axis=-1, keepdims=True)
            _accumulate(x, data * (g - dot))

    return _make(data, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance; then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain._needs_grad():
            red = tuple(range(g.ndim - 1))
            _accumulate(gain, np.sum(g * xhat, axis=red))
        if bias._needs_grad():
            red = tuple(range(g.ndim - 1))
            _accumulate(bias, np.sum(g, axis=red))
        if x._needs_grad():
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gain, bias), backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability rate, scale survivors by 1/keep."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep

    def backward(g):
        if x._needs_grad():
            _accumulate(x, g * mask)

    return _make(x.data * mask, (x,), backward)


def embedding(table, idx: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[idx[...], :]."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding index out of range")
    data = table.data[idx]

    def backward(g):
        if table._needs_grad():
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accumulate(table, gt)

    return _make(data, (table,), backward)


def index_select(x, axis: int, idx) -> Tensor:
    """Gather slices along one axis. Scatter-add on the way back."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        if x._needs_grad():
            moved = np.zeros(np.moveaxis(x.data, axis, 0).shape)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            _accumulate(x, np.moveaxis(moved, 0, axis))

    return _make(data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x._needs_grad():
            _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if x._needs_grad():
            _accumulate(x, np.transpose(g, inv))

    return _make(data, (x,), backward)


def swap_last2(x) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(ts, parts):
            if t._needs_grad():
                _accumulate(t, part)

    return _make(data, tuple(ts), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            if t._needs_grad():
                _accumulate(t, part)

    return _make(data, tuple(ts), backward)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x._needs_grad():
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(data, (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def square(x) -> Tensor:
    x = as_tensor(x)
    data = x.data * x.data

    def backward(g):
        if x._needs_grad():
            _accumulate(x, 2.0 * g * x.data)

    return _make(data, (x,), backward)


@dataclass
class DropoutState:
    """Counter-based RNG plan for dropout.

    Every call site draws from a Philox stream keyed on
    (run seed, optimisation step, site id), so a training step's noise is
    a pure function of those integers regardless of evaluation order.
    """

    seed: int
    step: int = 0

    def generator(self, site: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=(self.seed, self.step, site))
        return np.random.Generator(np.random.Philox(ss))
