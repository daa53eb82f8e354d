"""Latent-distribution analysis (per-dimension KDE + Jensen-Shannon
divergence) and the generalization metrics (normalized return, gap closure)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN2 = float(np.log(2.0))
DENSITY_FLOOR = 1e-12
MIN_SAMPLES = 30
GRID_POINTS = 512


@dataclass
class KDEstimate:
    """Gaussian-kernel density on an evaluation grid.

    Degenerate (zero-variance) samples become a single-cell point mass so
    divergences stay defined.
    """

    samples: np.ndarray
    bandwidth: float
    grid: np.ndarray
    density: np.ndarray
    degenerate: bool = False
    point: float | None = None


def scott_bandwidth(samples: np.ndarray) -> float:
    """Scott's rule h = sigma_hat * n^(-1/5)."""
    return float(np.std(samples, ddof=1) * len(samples) ** (-0.2))


def _eval_density(samples, grid, h, chunk=4096):
    out = np.zeros(len(grid), dtype=np.float64)
    norm = 1.0 / (len(samples) * h * np.sqrt(2.0 * np.pi))
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        z = (grid[:, None] - part[None, :]) / h
        out += np.exp(-0.5 * z * z).sum(axis=1)
    return out * norm


def _point_mass(value, grid):
    density = np.zeros(len(grid), dtype=np.float64)
    cell = grid[1] - grid[0]
    idx = int(np.clip(np.searchsorted(grid, value), 0, len(grid) - 1))
    if idx > 0 and abs(grid[idx - 1] - value) < abs(grid[idx] - value):
        idx -= 1
    density[idx] = 1.0 / cell
    return density


def kde_fit(samples: np.ndarray, grid: np.ndarray | None = None) -> KDEstimate:
    """Gaussian KDE with Scott's-rule bandwidth on a 512-point grid.

    Requires at least 30 samples. When no grid is supplied one is built from
    the sample range widened by 3 bandwidths.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if len(samples) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    h = scott_bandwidth(samples)
    if h <= 0.0:
        value = float(samples[0])
        if grid is None:
            grid = np.linspace(value - 1.0, value + 1.0, GRID_POINTS)
        return KDEstimate(samples=samples, bandwidth=0.0, grid=grid,
                          density=_point_mass(value, grid), degenerate=True, point=value)
    if grid is None:
        grid = np.linspace(samples.min() - 3 * h, samples.max() + 3 * h, GRID_POINTS)
    return KDEstimate(samples=samples, bandwidth=h, grid=grid,
                      density=_eval_density(samples, grid, h))


def shared_grid(a: np.ndarray, b: np.ndarray, points: int = GRID_POINTS) -> np.ndarray:
    """Grid spanning both sample sets, widened by 3x the larger bandwidth."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    h = max(scott_bandwidth(a), scott_bandwidth(b), 1e-3)
    lo = min(a.min(), b.min()) - 3 * h
    hi = max(a.max(), b.max()) + 3 * h
    return np.linspace(lo, hi, points)


def js_divergence(p: KDEstimate, q: KDEstimate) -> float:
    """Jensen-Shannon divergence in nats, integrated on the shared grid.

    JS = 0.5 KL(P||M) + 0.5 KL(Q||M) with M the midpoint mixture; densities
    are renormalized on the grid and floored at 1e-12 before logs. Bounded by
    ln 2.
    """
    if p.grid.shape != q.grid.shape or not np.allclose(p.grid, q.grid):
        raise ValueError("estimates must share an evaluation grid")
    grid = p.grid
    pd = np.maximum(p.density, DENSITY_FLOOR)
    qd = np.maximum(q.density, DENSITY_FLOOR)
    pd = pd / np.trapezoid(pd, grid)
    qd = qd / np.trapezoid(qd, grid)
    m = 0.5 * (pd + qd)
    kl_p = np.trapezoid(pd * np.log(pd / m), grid)
    kl_q = np.trapezoid(qd * np.log(qd / m), grid)
    return float(np.clip(0.5 * kl_p + 0.5 * kl_q, 0.0, LN2))


@dataclass
class DivergenceReport:
    per_dim: np.ndarray
    mean: float
    n_train: int
    n_test: int

    @property
    def dims(self) -> int:
        return len(self.per_dim)


def divergence_vector(h_train: np.ndarray, h_test: np.ndarray) -> DivergenceReport:
    """Per-dimension JS divergence between train and test latent matrices."""
    h_train = np.asarray(h_train, dtype=np.float64)
    h_test = np.asarray(h_test, dtype=np.float64)
    if h_train.ndim != 2 or h_test.ndim != 2:
        raise ValueError("latent matrices must be 2-D (samples x dims)")
    if h_train.shape[1] != h_test.shape[1]:
        raise ValueError(f"dimensionality mismatch: {h_train.shape[1]} vs {h_test.shape[1]}")
    dims = h_train.shape[1]
    d = np.zeros(dims, dtype=np.float64)
    for i in range(dims):
        a, b = h_train[:, i], h_test[:, i]
        ha, hb = scott_bandwidth(a), scott_bandwidth(b)
        if ha <= 0.0 and hb <= 0.0:
            # two point masses: zero divergence iff they coincide
            d[i] = 0.0 if abs(float(a[0]) - float(b[0])) < 1e-12 else LN2
            continue
        grid = shared_grid(a, b)
        d[i] = js_divergence(kde_fit(a, grid), kde_fit(b, grid))
    return DivergenceReport(per_dim=d, mean=float(d.mean()), n_train=len(h_train),
                            n_test=len(h_test))


def normalize_within_env(mean_by_method: dict[str, float]):
    """Min-max normalize mean divergences across methods within one
    environment. All-equal inputs map to zero with a degeneracy flag."""
    if len(mean_by_method) < 2:
        raise ValueError("need at least two methods to normalize within an environment")
    values = np.array(list(mean_by_method.values()), dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-15:
        return {k: 0.0 for k in mean_by_method}, True
    return {k: (v - lo) / (hi - lo) for k, v in mean_by_method.items()}, False


def r_norm(r: float, r_min: float, r_max: float) -> float:
    """(R - R_min) / (R_max - R_min)."""
    if r_max == r_min:
        raise ZeroDivisionError("normalized return undefined: R_max equals R_min")
    return (r - r_min) / (r_max - r_min)


def gap_closure(t_test: float, b_test: float, b_train: float) -> float:
    """Fraction of the baseline's generalization gap closed:
    (T_test - B_test) / (B_train - B_test); 1 means the gap is eliminated."""
    if b_train == b_test:
        raise ZeroDivisionError("gap closure undefined: baseline gap is zero")
    return (t_test - b_test) / (b_train - b_test)
