"""Central finite differences for checking reverse-mode gradients (float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(fn().data.sum())
            flat[i] = orig - h
            minus = float(fn().data.sum())
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss = fn()
    if loss.size != 1:
        loss = loss.sum()
    T.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries.

    The floor keeps central-difference roundoff (about 1e-10 at h=1e-5) on
    near-zero gradient entries from reading as a large relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    floor: float = 1e-4) -> float:
    """Worst relative error over ``params`` between backward() and central differences."""
    analytic = analytic_gradients(fn, params)
    return max(max_relative_error(a, numerical_gradient(fn, p, h), floor) for a, p in zip(analytic, params))


def numerical_entries(fn: Callable[[], Tensor], param: Tensor, flat_indices: Sequence[int],
                      h: float = 1e-5) -> np.ndarray:
    """Central differences for selected flat entries of ``param`` only."""
    flat = param.data.reshape(-1)
    out = np.zeros(len(flat_indices), dtype=np.float64)
    with T.no_grad():
        for j, i in enumerate(flat_indices):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(fn().data.sum())
            flat[i] = orig - h
            minus = float(fn().data.sum())
            flat[i] = orig
            out[j] = (plus - minus) / (2.0 * h)
    return out


def directional_derivative(fn: Callable[[], Tensor], params: Sequence[Tensor], directions: Sequence[np.ndarray],
                           h: float = 1e-5) -> float:
    """d/dt fn(params + t * directions) at t=0 by central differences; touches every entry at once."""
    originals = [p.data.copy() for p in params]
    try:
        with T.no_grad():
            for p, o, d in zip(params, originals, directions):
                p.data[...] = o + h * d
            plus = float(fn().data.sum())
            for p, o, d in zip(params, originals, directions):
                p.data[...] = o - h * d
            minus = float(fn().data.sum())
    finally:
        for p, o in zip(params, originals):
            p.data[...] = o
    return (plus - minus) / (2.0 * h)
