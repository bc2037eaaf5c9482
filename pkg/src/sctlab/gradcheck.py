"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor
from .optim import zero_grads


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backward() gradients of the scalar f() against central differences.

    f must be deterministic and rebuild its graph on every call. For
    parameters with more than max_coords entries a random coordinate
    subset is probed. Returns the worst relative error
    |a - n| / max(1e-8, |a| + |n|) over all probed coordinates.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            f_plus = f().item()
            flat[c] = keep - h
            f_minus = f().item()
            flat[c] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[c]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = rel
    zero_grads(params)
    return float(worst)
