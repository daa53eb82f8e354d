"""Procedural RGB textures: overlay backgrounds and environment themes.

Every texture is a pure function of (seed, height, width), float32 in [0,1].
"""

from __future__ import annotations

import numpy as np

_KINDS = ("gradient", "radial", "noise", "stripes", "checker")


def _unit_grid(h: int, w: int):
    y = np.linspace(0.0, 1.0, h, dtype=np.float32)
    x = np.linspace(0.0, 1.0, w, dtype=np.float32)
    return np.meshgrid(y, x, indexing="ij")


def _value_noise(rng, h, w, cells):
    """Bilinearly interpolated random lattice (Perlin-like value noise)."""
    lattice = rng.random((cells + 1, cells + 1, 3), dtype=np.float32)
    yy, xx = _unit_grid(h, w)
    fy = yy * cells
    fx = xx * cells
    y0 = np.minimum(fy.astype(np.int64), cells - 1)
    x0 = np.minimum(fx.astype(np.int64), cells - 1)
    ty = (fy - y0)[..., None]
    tx = (fx - x0)[..., None]
    c00 = lattice[y0, x0]
    c01 = lattice[y0, x0 + 1]
    c10 = lattice[y0 + 1, x0]
    c11 = lattice[y0 + 1, x0 + 1]
    top = c00 * (1 - tx) + c01 * tx
    bot = c10 * (1 - tx) + c11 * tx
    return top * (1 - ty) + bot * ty


def texture(seed: int, height: int, width: int) -> np.ndarray:
    """Deterministic (height, width, 3) float32 texture in [0,1]."""
    rng = np.random.Generator(np.random.PCG64(seed))
    kind = _KINDS[int(rng.integers(len(_KINDS)))]
    c0 = rng.random(3, dtype=np.float32)
    c1 = rng.random(3, dtype=np.float32)
    yy, xx = _unit_grid(height, width)

    if kind == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
        img = t[..., None] * c1 + (1.0 - t[..., None]) * c0
    elif kind == "radial":
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        t = np.clip(d / max(float(d.max()), 1e-6), 0.0, 1.0)
        img = t[..., None] * c1 + (1.0 - t[..., None]) * c0
    elif kind == "noise":
        cells = int(rng.integers(3, 7))
        base = _value_noise(rng, height, width, cells)
        detail = _value_noise(rng, height, width, cells * 3)
        img = 0.7 * base + 0.3 * detail
    elif kind == "stripes":
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(4.0, 12.0)
        phase = rng.uniform(0, 2 * np.pi)
        t = 0.5 * (1.0 + np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy)
                                + phase))
        img = t[..., None] * c1 + (1.0 - t[..., None]) * c0
    else:  # checker
        cells = int(rng.integers(3, 8))
        mask = ((yy * cells).astype(np.int64) + (xx * cells).astype(np.int64)) % 2
        img = np.where(mask[..., None] == 0, c0, c1)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


class BackgroundBank:
    """Fixed-size bank of overlay backgrounds, lazily rendered per frame size."""

    def __init__(self, seed: int = 0, size: int = 32):
        self.seed = seed
        self.size = size
        self._cache: dict[tuple[int, int, int], np.ndarray] = {}

    def get(self, index: int, height: int, width: int) -> np.ndarray:
        if not 0 <= index < self.size:
            raise ValueError(f"background index {index} outside bank of {self.size}")
        key = (index, height, width)
        if key not in self._cache:
            self._cache[key] = texture(self.seed * 100_003 + index, height, width)
        return self._cache[key]
