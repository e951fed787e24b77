"""Central finite-difference gradient checking (float64 only)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import EngineError, Tensor, backward, no_grad, reset_tape

# 4-point central stencil: f'(x) ~ [8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))] / 12h,
# written as paired differences so an unchanged loss gives exactly zero
_OFFSETS = (-2, -1, 1, 2)


def numeric_grad(f: Callable[[], Tensor], p: Tensor, eps: float, mask=None) -> np.ndarray:
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        if mask is not None and not mask.reshape(-1)[i]:
            continue
        orig = flat[i]
        vals = {}
        for k in _OFFSETS:
            flat[i] = orig + k * eps
            val = f().data
            if not np.isfinite(val).all():
                raise EngineError("non-finite loss during finite differencing")
            vals[k] = float(val)
        flat[i] = orig
        g.reshape(-1)[i] = (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12.0 * eps)
    return g


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def grad_check(build_scalar: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               masks: Sequence | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``build_scalar`` recomputes the loss from the current parameter values;
    ``masks`` optionally restricts the comparison per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise EngineError("grad_check requires float64 parameters")
        p.grad = None
    reset_tape()
    loss = build_scalar()
    if not np.isfinite(loss.data).all():
        raise EngineError("non-finite loss")
    backward(loss)
    worst = 0.0
    with no_grad():
        for j, p in enumerate(params):
            mask = None if masks is None else masks[j]
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            numeric = numeric_grad(build_scalar, p, eps, mask)
            err = relative_errors(analytic, numeric)
            if mask is not None:
                err = err[mask]
            if err.size:
                worst = max(worst, float(err.max()))
    return worst
