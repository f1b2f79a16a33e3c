"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import UsageError
from .tensor import Tensor, backward


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``x``."""
    base = x.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[idx] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2 * h)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max over elements of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` must build a fresh graph from its argument on every call and
    return a scalar Tensor. ``x`` must be double precision.
    """
    if x.dtype != np.float64:
        raise UsageError(f"grad_check requires float64 input, got {x.dtype}")
    xg = Tensor(x.data.copy(), requires_grad=True)
    backward(f(xg))
    analytic = xg.grad if xg.grad is not None else np.zeros_like(xg.data)
    numeric = numerical_grad(f, Tensor(x.data.copy()), h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
