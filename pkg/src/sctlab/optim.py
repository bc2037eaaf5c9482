"""AdamW with linear warmup, plus gradient utilities for named parameter dicts."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(FloatingPointError):
    """Raised when a parameter gradient contains NaN or inf."""

    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite gradient in '{name}' at optimiser step {step}")
        self.name = name
        self.step = step


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    update: p <- p - lr_t * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    lr_t:   base_lr * min(1, t / warmup_steps)
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        warmup_steps: int = 0,
    ):
        self.params = params
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def effective_lr(self, step: int | None = None) -> float:
        t = self.step_count if step is None else step
        if self.warmup_steps > 0:
            return self.base_lr * min(1.0, t / self.warmup_steps)
        return self.base_lr

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        lr_t = self.effective_lr(t)
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name, t)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay != 0.0:
                update = update + self.weight_decay * p.data
            p.data -= lr_t * update

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "base_lr": self.base_lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "warmup_steps": self.warmup_steps,
            "first_moment": {k: m.tolist() for k, m in self.m.items()},
            "second_moment": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.base_lr = float(state["base_lr"])
        self.beta1, self.beta2 = (float(b) for b in state["betas"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        self.warmup_steps = int(state["warmup_steps"])
        for k in self.params:
            self.m[k] = np.asarray(state["first_moment"][k], dtype=np.float64).reshape(
                self.params[k].shape
            )
            self.v[k] = np.asarray(state["second_moment"][k], dtype=np.float64).reshape(
                self.params[k].shape
            )
