"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

# Denominator floor: entries whose analytic and numeric gradients are both
# below this magnitude are compared in absolute terms.
DEFAULT_FLOOR = 1e-6


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite function value while perturbing {param.name or 'param'}[{i}]")
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
               floor: float = DEFAULT_FLOOR) -> float:
    """Max relative error between backprop and central differences.

    Error per entry is |a - n| / max(|a|, |n|, floor). Run in float64; the
    params' arrays are perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.grad = None
    out = fn()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("function output is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        numeric = numeric_grad(fn, p, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
