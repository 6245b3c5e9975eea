"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from adrf.tensor import Tape, Tensor

#: Gradients smaller than this are compared on an absolute scale.
GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all compared entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    ``fn`` must rebuild the loss from the current contents of ``params``.
    With ``max_entries`` only that many randomly chosen coordinates per
    parameter are perturbed. Returns the worst relative error.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric))
    return worst
