"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is ~0 from dividing noise
    by noise; it is far below every tolerance used here.
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-4,
                 max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param``.

    Returns (flat indices, numeric gradient at those indices).  With
    ``max_entries`` a random subset is probed.
    """
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h)
    return idx, out


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` must rebuild the graph on every call and be deterministic;
    parameters should be float64.  The relative-error floor scales with the
    largest analytic gradient (1e-6 of it), so entries whose true gradient
    is exactly zero, where central differences return pure rounding noise,
    do not count as failures.
    """
    grads = backward(fn(), params)
    scale = max((float(np.abs(grads[p]).max()) for p in params if grads[p].size), default=0.0)
    floor = max(1e-6, 1e-6 * scale)
    worst = 0.0
    for p in params:
        idx, num = numeric_grad(fn, p, h, max_entries, rng)
        ana = grads[p].reshape(-1)[idx]
        if idx.size:
            worst = max(worst, float(relative_error(ana, num, floor).max()))
    return worst
