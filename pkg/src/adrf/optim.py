"""Adaptive-moment optimizer with a step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from adrf import kernels
from adrf.tensor import NumericError, Tensor


@dataclass(frozen=True)
class StepDecay:
    """Multiply the base rate by ``factor`` at each milestone epoch (0-based)."""

    milestones: tuple = ()
    factor: float = 0.1

    def multiplier(self, epoch: int) -> float:
        return self.factor ** sum(1 for m in self.milestones if epoch >= m)


@dataclass
class Adam:
    params: Sequence[Tensor]
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: StepDecay = field(default_factory=StepDecay)
    step_count: int = 0
    epoch: int = 0

    def __post_init__(self):
        self.params = list(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.m = [np.ascontiguousarray(a) for a in self.m]
        self.v = [np.ascontiguousarray(a) for a in self.v]
        self._upd = [np.empty(p.data.size) for p in self.params]

    @property
    def current_lr(self) -> float:
        return self.lr * self.schedule.multiplier(self.epoch)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def step(self, grads: Mapping[Tensor, np.ndarray] | None = None) -> None:
        """Apply one update using ``grads`` (or each parameter's ``.grad``)."""
        gs = []
        for p in self.params:
            g = p.grad if grads is None else grads.get(p, p.grad)
            if g is None:
                raise ValueError(f"missing gradient for parameter {p.name or p.shape}")
            gs.append(g)
        t = self.step_count + 1
        lr = self.current_lr
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        updates = []
        for m, v, g, upd in zip(self.m, self.v, gs, self._upd):
            flat_g = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
            ok = kernels.adam_update(m.reshape(-1), v.reshape(-1), flat_g, upd, lr,
                                     self.beta1, self.beta2, self.eps, c1, c2)
            if not ok:
                raise NumericError("optimizer produced a non-finite update")
            updates.append(upd.reshape(m.shape))
        for p, upd in zip(self.params, updates):
            p.data -= upd
            p.grad = None
        self.step_count = t
