"""Adam with bias correction and a linear learning-rate warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    base_lr: float = 1e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0:
            return self.base_lr * min(1.0, step / self.warmup_steps)
        return self.base_lr

    @property
    def lr(self) -> float:
        """Learning rate the next call to :func:`adam_step` will use."""
        return self.lr_at(self.step)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None)))


def adam_step(params: dict[str, Tensor], state: AdamState, clip_norm: float | None = None) -> float:
    """Update ``params`` in place and zero their grads.  Returns the lr used.

    The lr for the update taking the counter from ``step`` to ``step + 1`` is
    ``base_lr * min(1, step / warmup_steps)``, so the very first update under
    warmup moves nothing.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")

    factor = 1.0
    if clip_norm is not None:
        norm = global_grad_norm(params)
        if norm > clip_norm:
            factor = clip_norm / norm

    lr = state.lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad * factor if factor != 1.0 else p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.shape:
            raise ContractError(f"adam_step: moment shape {m.shape} != parameter {name} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr != 0.0:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad.fill(0.0)
    state.step = t
    return lr
