"""Shared test oracles: central finite differences against analytic grads."""

from __future__ import annotations

import numpy as np

from duplexthink import tensor as tz


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of a scalar-valued f at x, one coordinate at a time.
    f must read x in place (the array is perturbed and restored)."""
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f())
        flat[i] = orig - h
        f_minus = float(f())
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out.reshape(x.shape)


def assert_grad_matches(f, params: list[tz.Tensor], h: float = 1e-3, rtol: float = 1e-3):
    """Backward pass vs finite differences for every tensor in params.

    Relative error is measured against max(|analytic|, |numeric|, 0.1) per
    coordinate, which keeps near-zero entries from blowing up the ratio while
    still catching real sign/scale mistakes.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    tz.backward(loss)
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        numeric = finite_difference_grad(lambda: f().item(), p.data, h)
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(p.grad)), 0.1)
        rel = np.abs(numeric - p.grad) / denom
        assert rel.max() < rtol, f"gradient mismatch: rel err {rel.max():.2e}"
    return True
