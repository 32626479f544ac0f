"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad, no_grad


def numeric_grad(fn: Callable[[], Tensor], arr: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """d fn / d arr by central differences; `arr` is perturbed in place and restored."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data.sum())
            flat[i] = orig - step
            fm = float(fn().data.sum())
            flat[i] = orig
            g[i] = (fp - fm) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation scaled by the largest gradient magnitude of the pair."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
                    seed: int = 0) -> float:
    """Worst relative error over `inputs` for the scalar sum(fn() * R) with random R."""
    with no_grad():
        shape = fn().shape
    proj = np.random.default_rng(seed + 7919).standard_normal(shape)

    def scalar():
        return (fn() * proj).sum()

    analytic = grad(scalar(), inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        num = numeric_grad(scalar, t.data, step)
        worst = max(worst, relative_error(a, num))
    return worst
