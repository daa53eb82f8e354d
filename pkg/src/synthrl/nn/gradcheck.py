"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Param


def gradient_check(loss_and_grad: Callable[[], float], params: list[Param],
                   rng: np.random.Generator, num_coords: int = 64,
                   eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_and_grad()` returns the scalar loss and accumulates gradients into
    every param in `params`. Run the networks in float64: the returned error
    is |analytic - fd| / max(|analytic|, |fd|, 1e-6), maximized over
    `num_coords` coordinates sampled uniformly across the concatenated
    parameter vector (all coordinates if fewer).
    """
    for p in params:
        p.zero_grad()
    loss_and_grad()
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    k = min(num_coords, total)
    coords = rng.choice(total, size=k, replace=False)

    worst = 0.0
    for c in coords:
        pi = int(np.searchsorted(offsets, c, side="right") - 1)
        off = int(c - offsets[pi])
        p = params[pi]
        orig = p.value.flat[off]
        p.value.flat[off] = orig + eps
        f_plus = loss_and_grad()
        p.value.flat[off] = orig - eps
        f_minus = loss_and_grad()
        p.value.flat[off] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[pi].flat[off]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        worst = max(worst, err)
    return worst
