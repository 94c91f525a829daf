"""Doubly robust counterfactual density baselines for scalar outcomes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import pdist

from .designs import ObservationalDataset
from .errors import ValidationError
from .metrics import grid_points, normalize_density, w1_density_quadrature
from .nuisance import NuisanceBundle
from .numkit import RngState

M_COND = 64
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class DensityEstimate:
    grid: tuple
    values: np.ndarray
    raw_mass: float
    method: str
    bandwidth: Optional[float] = None
    coefficients: Optional[np.ndarray] = None

    @property
    def points(self) -> np.ndarray:
        return grid_points(self.grid)

    @property
    def mass(self) -> float:
        return float(trapezoid(self.values, self.points))

    def pdf(self, y) -> np.ndarray:
        return np.interp(np.asarray(y, dtype=np.float64), self.points, self.values, left=0.0, right=0.0)

    def w1_to(self, samples) -> float:
        return w1_density_quadrature(self.values, samples, self.grid)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid_point", "value"])
            for g, v in zip(self.points, self.values):
                w.writerow([repr(float(g)), repr(float(v))])
        return path


def _scalar_outcomes(data: ObservationalDataset):
    if data.p != 1:
        raise ValidationError("density baselines need scalar outcomes")
    return data.y[:, 0]


def _aipw_atoms(data: ObservationalDataset, nuisances: NuisanceBundle, a: int, m_cond: int,
                rng: RngState):
    """Point masses whose weighted sum of kernels is the AIPW density.

    Observed arm-``a`` outcomes get weight ``w_i / n`` and each of the
    ``m_cond`` plug-in draws of unit ``i`` gets ``(1 - w_i) / (n m_cond)``.
    Zero-weight atoms are dropped.
    """
    n = data.n
    y = _scalar_outcomes(data)
    observed = data.a == a
    w = observed / nuisances.pi(a)
    draws = nuisances.plugin_draws(a, np.arange(n), m_cond, rng)[:, :, 0]
    atoms = np.concatenate([y[observed], draws.ravel()])
    coef = np.concatenate([w[observed] / n, np.repeat((1.0 - w) / (n * m_cond), m_cond)])
    keep = coef != 0.0
    return atoms[keep], coef[keep], draws


def median_heuristic_bandwidth(values, rng: Optional[RngState] = None, max_points: int = 512) -> float:
    """Gaussian kernel scale ``median|y_i - y_j| / sqrt(2 log(n + 1))``.

    The median is taken over a subsample of at most ``max_points`` values;
    ``n`` is the full sample size so the scale keeps shrinking with ``n``.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ValidationError("need at least two points for the median heuristic")
    n = v.size
    if v.size > max_points:
        rng = rng or RngState(0, 0)
        v = v[rng.permutation(v.size)[:max_points]]
    med = float(np.median(pdist(v[:, None])))
    if med <= 0:
        med = float(np.std(v)) or 1.0
    return med / np.sqrt(2.0 * np.log(n + 1.0))


def gaussian_mixture_on_grid(pts, atoms, coef, h: float, chunk: int = 1 << 22) -> np.ndarray:
    """``sum_k coef_k N(pts; atoms_k, h^2)`` evaluated exactly in chunks."""
    out = np.zeros(pts.shape[0])
    step = max(1, chunk // max(pts.shape[0], 1))
    for s in range(0, atoms.shape[0], step):
        z = (pts[:, None] - atoms[None, s:s + step]) / h
        out += np.exp(-0.5 * z * z) @ coef[s:s + step]
    return out / (h * _SQRT_2PI)


def kde_aipw_density(data: ObservationalDataset, nuisances: NuisanceBundle, a: int, grid=None,
                     bandwidth: Union[str, float] = "median_heuristic", rng: RngState = None,
                     m_cond: int = M_COND, n_pts: int = 2048) -> DensityEstimate:
    """AIPW kernel density estimate of the counterfactual outcome density on a grid."""
    rng = rng or RngState(0, 0)
    y = _scalar_outcomes(data)
    if bandwidth == "median_heuristic":
        arm_y = y[data.a == a]
        h = median_heuristic_bandwidth(arm_y, rng.child("bandwidth"))
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValidationError("bandwidth must be positive")
    atoms, coef, _ = _aipw_atoms(data, nuisances, a, m_cond, rng.child("plugin"))
    if grid is None:
        grid = (float(atoms.min() - 4 * h), float(atoms.max() + 4 * h), int(n_pts))
    pts = grid_points(grid)
    raw = gaussian_mixture_on_grid(pts, atoms, coef, h)
    values, raw_mass = normalize_density(raw, pts)
    return DensityEstimate(tuple(grid), values, raw_mass, "kde_aipw", bandwidth=h)


def cosine_basis(u, d: int) -> np.ndarray:
    """``sqrt(2) cos(pi j u)`` for ``j = 1..d``; returns ``(len(u), d)``."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    return np.sqrt(2.0) * np.cos(np.pi * u * np.arange(1, d + 1))


def tse_density(data: ObservationalDataset, nuisances: NuisanceBundle, a: int, d: int = 20,
                rng: RngState = None, m_cond: int = M_COND, n_pts: int = 2048,
                y_range: Optional[tuple] = None) -> DensityEstimate:
    """Truncated cosine-series density with AIPW coefficients on the observed outcome range."""
    if d < 1:
        raise ValidationError("d must be >= 1")
    rng = rng or RngState(0, 0)
    y = _scalar_outcomes(data)
    lo, hi = y_range if y_range is not None else (float(y.min()), float(y.max()))
    if not hi > lo:
        raise ValidationError("outcome range is degenerate")
    span = hi - lo
    n = data.n
    observed = data.a == a
    w = observed / nuisances.pi(a)
    draws = nuisances.plugin_draws(a, np.arange(n), m_cond, rng.child("plugin"))[:, :, 0]
    mu = cosine_basis(np.clip((draws.ravel() - lo) / span, 0, 1), d).reshape(n, m_cond, d).mean(axis=1)
    phi_obs = np.zeros((n, d))
    phi_obs[observed] = cosine_basis(np.clip((y[observed] - lo) / span, 0, 1), d)
    theta = np.mean(mu + w[:, None] * (phi_obs - mu), axis=0)
    grid = (lo, hi, int(n_pts))
    pts = grid_points(grid)
    raw = (1.0 + cosine_basis((pts - lo) / span, d) @ theta) / span
    values, raw_mass = normalize_density(raw, pts)
    return DensityEstimate(grid, values, raw_mass, "tse", coefficients=theta)
