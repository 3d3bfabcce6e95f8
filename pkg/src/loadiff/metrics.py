"""Scoring of generated ensembles against observed curves.

All quantities are computed in normalized units. Ensembles are ``[S, N]`` for a
single day or ``[D, S, N]`` for several; actuals are ``[N]`` / ``[D, N]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError, ShapeError

KDE_GRID_POINTS = 512
DENSITY_FLOOR = 1e-12


def _ensemble(samples):
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim < 2:
        raise ShapeError(f"ensemble must be [S, N] or [D, S, N], got shape {arr.shape}")
    if arr.shape[-2] < 2:
        raise DataError(f"need at least 2 ensemble members, got {arr.shape[-2]}")
    if not np.isfinite(arr).all():
        raise DataError("ensemble contains non-finite values")
    return arr


def empirical_quantiles(ensemble, q):
    """Linear-interpolation sample quantiles along the member axis."""
    arr = _ensemble(ensemble)
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0) or np.any(q >= 1.0):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")
    return np.quantile(arr, q, axis=-2, method="linear")


def as_fraction(pinc):
    """Accept nominal coverage as 0.9 or as 90 (percent)."""
    p = float(pinc)
    if p > 1.0:
        p /= 100.0
    if not 0.0 < p < 1.0:
        raise ValueError(f"nominal coverage must be in (0, 1) or (0, 100), got {pinc}")
    return p


@dataclass
class PredictionInterval:
    lower: np.ndarray
    upper: np.ndarray
    pinc: float

    @property
    def alpha(self):
        return 1.0 - self.pinc

    @property
    def width(self):
        return self.upper - self.lower


def interval_from_ensemble(ensemble, pinc) -> PredictionInterval:
    p = as_fraction(pinc)
    alpha = 1.0 - p
    lower, upper = empirical_quantiles(ensemble, [alpha / 2.0, 1.0 - alpha / 2.0])
    return PredictionInterval(lower, upper, p)


def _aligned(interval, actual):
    y = np.asarray(actual, dtype=np.float64)
    if y.shape != interval.lower.shape:
        raise ShapeError(f"actuals shape {y.shape} differs from interval shape {interval.lower.shape}")
    return y


def picp_ace(interval: PredictionInterval, actual, pinc=None):
    """Coverage fraction (endpoints inclusive) and its absolute gap to nominal."""
    y = _aligned(interval, actual)
    p = interval.pinc if pinc is None else as_fraction(pinc)
    picp = float(np.mean((y >= interval.lower) & (y <= interval.upper)))
    return picp, abs(picp - p)


def average_width(interval: PredictionInterval):
    if interval.lower.size == 0:
        raise ValueError("empty interval")
    return float(np.mean(interval.width))


def interval_scores(interval: PredictionInterval, actual, alpha=None):
    """Per-point score: ``-2 alpha W`` minus ``4 x`` the distance by which y misses."""
    y = _aligned(interval, actual)
    a = interval.alpha if alpha is None else float(alpha)
    s = -2.0 * a * interval.width
    s = s - 4.0 * np.clip(interval.lower - y, 0.0, None)
    s = s - 4.0 * np.clip(y - interval.upper, 0.0, None)
    return s


def overall_score(interval: PredictionInterval, actual, alpha=None):
    return float(np.mean(interval_scores(interval, actual, alpha)))


def point_mse(ensemble, actual):
    """MSE of the ensemble-mean curve against the observed curve."""
    arr = _ensemble(ensemble)
    y = np.asarray(actual, dtype=np.float64)
    mean_curve = arr.mean(axis=-2)
    if mean_curve.shape != y.shape:
        raise ShapeError(f"actuals shape {y.shape} differs from ensemble mean shape {mean_curve.shape}")
    return float(np.mean((mean_curve - y) ** 2))


# -- density reconstruction ------------------------------------------------------


def silverman_bandwidth(samples):
    x = np.asarray(samples, dtype=np.float64)
    sigma = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sigma, (q75 - q25) / 1.34)
    if spread <= 0.0:
        spread = sigma
    return 0.9 * spread * x.size ** (-0.2)


@dataclass
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    samples: np.ndarray

    def evaluate(self, grid):
        """Density on another grid, renormalized there by the trapezoid rule."""
        return _normalized(grid, kernels.gaussian_kde_eval(grid, self.samples, self.bandwidth))


def _normalized(grid, density):
    mass = np.trapezoid(density, grid)
    if mass <= 0.0:
        raise DataError("density has no mass on the evaluation grid")
    return density / mass


def kde(samples, n_grid=KDE_GRID_POINTS, bandwidth=None, grid=None) -> DensityEstimate:
    """Gaussian KDE on a uniform grid over ``[min - 3h, max + 3h]``.

    The density is rescaled so its trapezoidal integral over the grid is one.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2 or np.ptp(x) == 0.0:
        raise DataError("KDE needs at least two distinct samples")
    h = float(bandwidth) if bandwidth is not None else silverman_bandwidth(x)
    if grid is None:
        grid = np.linspace(x.min() - 3.0 * h, x.max() + 3.0 * h, n_grid)
    dens = _normalized(grid, kernels.gaussian_kde_eval(grid, x, h))
    return DensityEstimate(grid, dens, h, x)


def kl_from_arrays(p, q, grid=None):
    """``sum p log(p/q)``; trapezoid-weighted when ``grid`` is given.

    Both arrays are floored at ``DENSITY_FLOOR`` before the log.
    """
    p = np.maximum(np.asarray(p, dtype=np.float64), DENSITY_FLOOR)
    q = np.maximum(np.asarray(q, dtype=np.float64), DENSITY_FLOOR)
    terms = p * np.log(p / q)
    if grid is None:
        return float(terms.sum())
    return float(np.trapezoid(terms, grid))


def shared_grid(p: DensityEstimate, q: DensityEstimate, n_grid=KDE_GRID_POINTS):
    lo = min(p.grid[0], q.grid[0])
    hi = max(p.grid[-1], q.grid[-1])
    return np.linspace(lo, hi, n_grid)


def kl_divergence(p: DensityEstimate, q: DensityEstimate, n_grid=KDE_GRID_POINTS):
    """KL(p || q) after re-evaluating both estimates on the union of their grids."""
    grid = shared_grid(p, q, n_grid)
    return kl_from_arrays(p.evaluate(grid), q.evaluate(grid), grid)


@dataclass
class StepDensity:
    step: int
    grid: np.ndarray
    actual: np.ndarray
    generated: np.ndarray
    kl: float


def per_step_kl(ensembles, actuals, n_grid=KDE_GRID_POINTS):
    """KL(actual || generated) per time step, pooling every day's members.

    ``ensembles`` is ``[D, S, N]`` and ``actuals`` is ``[D, N]``. Steps where
    either side has no spread yield ``kl = nan``.
    """
    ens = _ensemble(ensembles)
    y = np.asarray(actuals, dtype=np.float64)
    if ens.ndim != 3 or y.shape != (ens.shape[0], ens.shape[2]):
        raise ShapeError(f"need [D,S,N] ensembles and [D,N] actuals, got {ens.shape} and {y.shape}")
    out = []
    for step in range(ens.shape[2]):
        try:
            p = kde(y[:, step], n_grid)
            q = kde(ens[:, :, step], n_grid)
        except DataError:
            out.append(StepDensity(step, np.empty(0), np.empty(0), np.empty(0), float("nan")))
            continue
        grid = shared_grid(p, q, n_grid)
        dp, dq = p.evaluate(grid), q.evaluate(grid)
        out.append(StepDensity(step, grid, dp, dq, kl_from_arrays(dp, dq, grid)))
    return out


# -- aggregate report ------------------------------------------------------------


def persistence_ensemble(conditions, S=2, residuals=None):
    """Baseline built on the previous day's curve.

    Without ``residuals`` the curve is repeated ``S`` times, giving zero-width
    bands. With ``residuals`` (``[R, N]`` day-over-day changes, typically taken
    from the training split) every residual is added to the curve, so the
    ensemble has ``R`` members and honest spread.
    """
    c = np.asarray(conditions, dtype=np.float64)
    if residuals is None:
        return np.repeat(c[..., None, :], S, axis=-2)
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != c.shape[-1]:
        raise ShapeError(f"residuals must be [R, {c.shape[-1]}], got {r.shape}")
    return c[..., None, :] + r


def evaluate(ensembles, actuals, pincs=(0.8, 0.9, 0.95), with_kl=True, n_grid=KDE_GRID_POINTS):
    """Interval, point and density metrics for ``[D, S, N]`` ensembles.

    Returns ``(summary, intervals, densities)``: a flat dict with the keys
    pinc/picp/ace/ace_signed/aw/score per level plus ``mse`` and
    ``kl_per_step``; the per-level :class:`PredictionInterval` objects; and the
    per-step density curves.
    """
    ens = _ensemble(ensembles)
    y = np.asarray(actuals, dtype=np.float64)
    if ens.ndim != 3 or y.shape != (ens.shape[0], ens.shape[2]):
        raise ShapeError(f"need [D,S,N] ensembles and [D,N] actuals, got {ens.shape} and {y.shape}")
    levels = []
    intervals = {}
    for pinc in pincs:
        p = as_fraction(pinc)
        iv = interval_from_ensemble(ens, p)
        picp, ace = picp_ace(iv, y)
        levels.append(
            {
                "pinc": p,
                "picp": picp,
                "ace": ace,
                "ace_signed": picp - p,
                "aw": average_width(iv),
                "score": overall_score(iv, y),
            }
        )
        intervals[p] = iv
    summary = {
        "days": int(ens.shape[0]),
        "members": int(ens.shape[1]),
        "levels": levels,
        "mse": point_mse(ens, y),
    }
    densities = []
    if with_kl:
        densities = per_step_kl(ens, y, n_grid)
        summary["kl_per_step"] = [None if np.isnan(d.kl) else d.kl for d in densities]
        finite = [d.kl for d in densities if not np.isnan(d.kl)]
        summary["kl_mean"] = float(np.mean(finite)) if finite else None
        summary["kl_max"] = float(np.max(finite)) if finite else None
    return summary, intervals, densities
