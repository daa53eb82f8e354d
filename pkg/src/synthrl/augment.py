"""The four retained pixel augmentations: rotate, color jitter, color cutout,
background overlay.

Images are float32 (H, W, 3) in [0,1]; frame stacks are (k, H, W, 3). One
sampled spec is applied identically to every frame of a stack, and the two
observations of a transition get independently sampled specs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .textures import BackgroundBank

KINDS = ("rotate", "jitter", "cutout", "overlay")

ROTATE_MAX_DEG = 90.0
BRIGHTNESS_RANGE = (0.2, 0.6)
CONTRAST_RANGE = (0.2, 0.8)
SATURATION_RANGE = (0.2, 0.8)
HUE_RANGE = (0.1, 0.7)
CUTOUT_MAX_FRAC = 0.2
ALPHA_RANGE = (0.2, 0.5)

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentSpec:
    """One sampled transform. Rect coordinates are fractions of the frame so a
    spec applies to any resolution."""

    kind: str
    theta: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    rect: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # y, x, h, w
    rgb: tuple[int, int, int] = (0, 0, 0)
    background: int = 0
    alpha: float = 0.0


def sample_spec(rng: np.random.Generator, bank_size: int = 32) -> AugmentSpec:
    """Draw one of the four kinds with equal probability, parameters uniform
    over their ranges."""
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == "rotate":
        return AugmentSpec(kind, theta=float(rng.uniform(-ROTATE_MAX_DEG, ROTATE_MAX_DEG)))
    if kind == "jitter":
        return AugmentSpec(kind,
                           brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
                           contrast=float(rng.uniform(*CONTRAST_RANGE)),
                           saturation=float(rng.uniform(*SATURATION_RANGE)),
                           hue=float(rng.uniform(*HUE_RANGE)))
    if kind == "cutout":
        rh = float(rng.uniform(0.0, CUTOUT_MAX_FRAC))
        rw = float(rng.uniform(0.0, CUTOUT_MAX_FRAC))
        ry = float(rng.uniform(0.0, 1.0 - rh))
        rx = float(rng.uniform(0.0, 1.0 - rw))
        rgb = tuple(int(v) for v in rng.integers(0, 256, size=3))
        return AugmentSpec(kind, rect=(ry, rx, rh, rw), rgb=rgb)
    return AugmentSpec(kind, background=int(rng.integers(bank_size)),
                       alpha=float(rng.uniform(*ALPHA_RANGE)))


def rotate(img: np.ndarray, theta: float) -> np.ndarray:
    """Rotate about the image center, bilinear sampling, zero fill outside."""
    h, w = img.shape[:2]
    rad = np.deg2rad(theta)
    cos, sin = np.cos(rad), np.sin(rad)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32),
                         indexing="ij")
    # inverse map: rotate output coords by -theta back into the source frame
    dy, dx = yy - cy, xx - cx
    sy = cos * dy + sin * dx + cy
    sx = -sin * dy + cos * dx + cx

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    ty = sy - y0
    tx = sx - x0

    def gather(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        return img[yc, xc] * valid[..., None]

    out = (gather(y0, x0) * ((1 - ty) * (1 - tx))[..., None]
           + gather(y0, x0 + 1) * ((1 - ty) * tx)[..., None]
           + gather(y0 + 1, x0) * (ty * (1 - tx))[..., None]
           + gather(y0 + 1, x0 + 1) * (ty * tx)[..., None])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _rgb_to_hsv(img: np.ndarray):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span == 0, 0.0, (h / 6.0) % 1.0)
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def color_jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float,
                 hue: float) -> np.ndarray:
    """Brightness -> contrast -> saturation -> hue, clamped to [0,1] after each.

    Brightness and contrast/saturation are multiplicative factors (contrast
    interpolates toward the per-image mean luminance, saturation toward the
    per-pixel luminance); hue is a fraction of the full hue circle.
    """
    out = np.clip(img * brightness, 0.0, 1.0)
    mean_luma = float((out @ _LUMA).mean())
    out = np.clip(mean_luma + contrast * (out - mean_luma), 0.0, 1.0)
    luma = (out @ _LUMA)[..., None]
    out = np.clip(luma + saturation * (out - luma), 0.0, 1.0)
    if hue != 0.0:
        hh, ss, vv = _rgb_to_hsv(out)
        out = _hsv_to_rgb((hh + hue) % 1.0, ss, vv)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def color_cutout(img: np.ndarray, rect: tuple[float, float, float, float],
                 rgb: tuple[int, int, int]) -> np.ndarray:
    """Fill one rectangle (fractional coords, each side at most 20% of the
    frame) with a flat color given as 0-255 RGB."""
    h, w = img.shape[:2]
    ry, rx, rh, rw = rect
    if rh > CUTOUT_MAX_FRAC + 1e-9 or rw > CUTOUT_MAX_FRAC + 1e-9:
        raise ValueError(f"cutout rect {rh:.3f}x{rw:.3f} exceeds the 20% per-side bound")
    y0 = int(round(ry * h))
    x0 = int(round(rx * w))
    hpx = int(round(rh * h))
    wpx = int(round(rw * w))
    y0 = min(max(y0, 0), h)
    x0 = min(max(x0, 0), w)
    out = img.copy()
    out[y0:y0 + hpx, x0:x0 + wpx] = np.array(rgb, dtype=np.float32) / 255.0
    return out


def background_overlay(img: np.ndarray, bg: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * background + (1 - alpha) * image, per pixel per channel."""
    if bg.shape != img.shape:
        raise ValueError(f"background shape {bg.shape} != image shape {img.shape}")
    return np.clip(alpha * bg + (1.0 - alpha) * img, 0.0, 1.0).astype(np.float32)


def apply_spec(img: np.ndarray, spec: AugmentSpec, bank: BackgroundBank) -> np.ndarray:
    if spec.kind == "rotate":
        return rotate(img, spec.theta)
    if spec.kind == "jitter":
        return color_jitter(img, spec.brightness, spec.contrast, spec.saturation, spec.hue)
    if spec.kind == "cutout":
        return color_cutout(img, spec.rect, spec.rgb)
    if spec.kind == "overlay":
        bg = bank.get(spec.background, img.shape[0], img.shape[1])
        return background_overlay(img, bg, spec.alpha)
    raise ValueError(f"unknown augmentation kind {spec.kind!r}")


def augment_stack(stack: np.ndarray, spec: AugmentSpec, bank: BackgroundBank) -> np.ndarray:
    """Apply the identical transform to every frame of a (k, H, W, 3) stack."""
    return np.stack([apply_spec(frame, spec, bank) for frame in stack])


def augment_transition(s: np.ndarray, s_next: np.ndarray, rng: np.random.Generator,
                       bank: BackgroundBank) -> tuple[np.ndarray, np.ndarray]:
    """Independently sampled specs for s and s', each applied stack-consistently."""
    spec_s = sample_spec(rng, bank.size)
    spec_next = sample_spec(rng, bank.size)
    return augment_stack(s, spec_s, bank), augment_stack(s_next, spec_next, bank)


def to_float(frames_u8: np.ndarray) -> np.ndarray:
    return frames_u8.astype(np.float32) / 255.0


def to_u8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)


def augment_dataset(ds, seed: int, bank: BackgroundBank | None = None):
    """Materialize an augmented copy of a pixel dataset (size unchanged).

    Each transition's s and s' get independently sampled specs; the header's
    augmented flag is set. Deterministic for a given seed.
    """
    from dataclasses import replace

    rng = np.random.Generator(np.random.PCG64(seed))
    bank = bank or BackgroundBank(seed=0)
    s_out = np.empty_like(ds.s)
    next_out = np.empty_like(ds.s_next)
    for i in range(len(ds)):
        s_aug, next_aug = augment_transition(to_float(ds.s[i]), to_float(ds.s_next[i]),
                                             rng, bank)
        s_out[i] = to_u8(s_aug)
        next_out[i] = to_u8(next_aug)
    return replace(ds, s=s_out, s_next=next_out, augmented=True,
                   provenance=ds.provenance.copy())
