"""Adam and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Param


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


@dataclass(frozen=True)
class LRSchedule:
    """Constant or cosine-annealed learning rate over a fixed step budget."""

    base_lr: float
    total_steps: int
    kind: str = "cosine"  # "constant" | "cosine"

    def value(self, step: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        if self.kind != "cosine":
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        s = min(max(step, 0), self.total_steps)
        return self.base_lr * 0.5 * (1.0 + np.cos(np.pi * s / self.total_steps))


def cosine_lr(step: int, schedule: LRSchedule) -> float:
    """Learning rate at `step`; steps past the budget clamp to the final value."""
    return schedule.value(step)


class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list[Param], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in {p.name} at step {self.t}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
