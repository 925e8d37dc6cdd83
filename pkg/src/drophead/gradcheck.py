"""Central finite differences, the reference against which backward() is checked."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor

FD_STEP = 1e-5
GRAD_RTOL = 1e-4
# Denominator floor for the relative error: below this magnitude the
# comparison is effectively absolute, which keeps FD round-off (~1e-10) from
# dominating near-zero gradients.
GRAD_FLOOR = 1e-6


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def analytic_grads(loss_fn: Callable[[], Tensor], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = FD_STEP,
) -> dict[str, float]:
    """Worst relative error of backward() vs finite differences, per parameter."""
    analytic = analytic_grads(loss_fn, params)
    worst = {}
    for name, p in params.items():
        num = numerical_grad(lambda: float(loss_fn().data), p.data, h)
        worst[name] = float(relative_error(analytic[name], num).max()) if p.data.size else 0.0
    return worst
