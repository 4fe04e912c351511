"""AdamW with decoupled weight decay, global-norm clipping, and the
inverse-square-root learning-rate schedule used by every training stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def lr_schedule(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to peak_lr, then decay as sqrt(warmup/step)."""
    if step < 1:
        raise ValueError("lr_schedule: step must be >= 1")
    warmup = max(1, warmup_steps)
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators plus the shared hyperparameters."""

    peak_lr: float
    warmup_steps: int
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        return lr_schedule(step, self.peak_lr, self.warmup_steps)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.
    Returns the pre-clip norm. Parameters without gradients are skipped."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float | None = None) -> float:
    """One decoupled-weight-decay Adam update over every parameter that has a
    gradient. Moment tensors are allocated lazily per parameter name."""
    state.step += 1
    if lr is None:
        lr = state.lr_at(state.step)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(f"adamw_step: non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        t.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay > 0.0:
            t.data -= lr * state.weight_decay * t.data
    return lr
