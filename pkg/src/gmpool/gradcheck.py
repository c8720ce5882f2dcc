"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

__all__ = ["numerical_grad", "analytic_grads", "relative_error", "check_gradients"]


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. the array ``x``, perturbed in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2.0 * eps)
    return g


def analytic_grads(loss_fn: Callable[[], ad.Tensor], params: Sequence[ad.Tensor]) -> list[np.ndarray]:
    ad.zero_grad(params)
    ad.backward(loss_fn())
    return [p.grad.copy() for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``max |a - b| / max(|a|, |b|, floor)`` over all entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(
    loss_fn: Callable[[], ad.Tensor], params: Sequence[ad.Tensor], eps: float = 1e-5, floor: float = 1e-8
) -> float:
    """Worst relative error between tape and finite-difference gradients."""
    got = analytic_grads(loss_fn, params)
    worst = 0.0
    for p, g in zip(params, got):
        num = numerical_grad(lambda: float(loss_fn().values), p.values, eps)
        worst = max(worst, relative_error(g, num, floor))
    return worst
