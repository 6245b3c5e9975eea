"""Minibatch training loop shared by the IMU and vision models."""
from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np

from adrf.optim import Adam, StepDecay
from adrf.tensor import NumericError, Tape, Tensor

log = logging.getLogger(__name__)


class DivergenceError(NumericError):
    """Training produced a non-finite loss, gradient or parameter."""


def scaled_milestones(epochs: int, fractions=(0.5, 0.8)) -> tuple:
    """Decay epochs at fixed fractions of the run (50 and 80 of 100 by default)."""
    return tuple(max(1, int(round(f * epochs))) for f in fractions)


def run_epochs(
    params: Sequence[Tensor],
    n_items: int,
    step_loss: Callable[[np.ndarray], Tensor],
    *,
    epochs: int,
    lr: float,
    batch: int,
    seed,
    schedule: StepDecay | None = None,
    name: str = "model",
    on_epoch: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Shuffle, batch and optimize; returns the mean loss of every epoch.

    ``step_loss(idx)`` builds the scalar loss of the items ``idx`` on the
    active tape.
    """
    if n_items < 1:
        raise ValueError(f"{name}: nothing to train on")
    if epochs < 1 or batch < 1:
        raise ValueError(f"{name}: epochs and batch must be positive")
    params = [p for p in params if p.requires_grad]
    opt = Adam(params, lr=lr, schedule=schedule or StepDecay())
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        order = rng.permutation(n_items)
        total = 0.0
        for start in range(0, n_items, batch):
            idx = order[start : start + batch]
            try:
                with Tape() as tape:
                    loss = step_loss(idx)
                tape.backward(loss)
                opt.step()
            except NumericError as exc:
                raise DivergenceError(f"{name}: diverged in epoch {epoch}: {exc}") from exc
            total += loss.item() * idx.size
        mean = total / n_items
        if not math.isfinite(mean):
            raise DivergenceError(f"{name}: loss became non-finite in epoch {epoch}")
        history.append(mean)
        log.debug("%s epoch %d loss %.6g lr %.3g", name, epoch, mean, opt.current_lr)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return history


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, v.size))
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
