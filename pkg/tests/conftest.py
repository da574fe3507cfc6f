"""Shared test utilities: an independent central-difference oracle.

The oracle perturbs raw parameter arrays in place and re-evaluates a
scalar-returning closure, so it exercises only forward computations and
stays independent of the backward pass it is used to check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def central_diff_grads(
    loss_fn: Callable[[], float],
    arrays: Sequence[np.ndarray],
    h: float = 1e-6,
) -> list[np.ndarray]:
    """Central finite differences of loss_fn w.r.t. each array, in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
