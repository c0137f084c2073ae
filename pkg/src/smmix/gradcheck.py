"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def numerical_grad(fn: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn()
        flat[i] = orig - step
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences.

    ``loss_fn`` rebuilds the graph from the current parameter values on every
    call; parameters must be float64 leaves with ``requires_grad``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradcheck needs float64 parameters")
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        return float(loss_fn().data)

    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numerical_grad(value, p.data, step)))
    return worst
