"""Distributional distances between samples and densities."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError
from .numkit import RngState


@dataclass
class MetricReport:
    metric_name: str
    arm: int
    value: float
    n_source: int
    n_target: int
    seed: int

    def __post_init__(self):
        if not self.value >= 0:
            raise ValidationError(f"metric value must be >= 0, got {self.value}")

    def as_dict(self):
        return asdict(self)


def _as_1d(v, name):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValidationError(f"{name} is empty")
    return v


def w1_empirical_1d(xs, ys) -> float:
    """Exact W1 between two 1-D empirical measures (integral of |F_x - F_y|)."""
    x = np.sort(_as_1d(xs, "xs"), kind="stable")
    y = np.sort(_as_1d(ys, "ys"), kind="stable")
    if x.size == y.size:
        return float(np.mean(np.abs(x - y)))
    allv = np.sort(np.concatenate([x, y]), kind="stable")
    gaps = np.diff(allv)
    fx = np.searchsorted(x, allv[:-1], side="right") / x.size
    fy = np.searchsorted(y, allv[:-1], side="right") / y.size
    return float(np.sum(np.abs(fx - fy) * gaps))


def w2sq_1d(xs, ys) -> float:
    """Exact squared W2 between 1-D empirical measures via quantile matching."""
    x = np.sort(_as_1d(xs, "xs"), kind="stable")
    y = np.sort(_as_1d(ys, "ys"), kind="stable")
    if x.size == y.size:
        return float(np.mean((x - y) ** 2))
    levels = np.union1d(np.arange(1, x.size + 1) / x.size, np.arange(1, y.size + 1) / y.size)
    widths = np.diff(np.concatenate([[0.0], levels]))
    mids = levels - 0.5 * widths
    qx = x[np.minimum((mids * x.size).astype(np.int64), x.size - 1)]
    qy = y[np.minimum((mids * y.size).astype(np.int64), y.size - 1)]
    return float(np.sum(widths * (qx - qy) ** 2))


def ot_lp_oracle(source, target, cost: str = "sq_euclidean"):
    """Exact OT between uniform empirical measures (assignment or LP).

    Returns ``(plan, total_cost)``; the plan's rows sum to 1/m and columns to 1/k.
    """
    s = np.asarray(source, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    s = s[:, None] if s.ndim == 1 else s
    t = t[:, None] if t.ndim == 1 else t
    m, k = s.shape[0], t.shape[0]
    if m == 0 or k == 0:
        raise ValidationError("empty point set")
    if m > 64 or k > 64:
        raise ValidationError(f"ot_lp_oracle is limited to 64 points per side (got {m}x{k})")
    if cost == "sq_euclidean":
        C = cdist(s, t, "sqeuclidean")
    elif cost == "euclidean":
        C = cdist(s, t, "euclidean")
    else:
        raise ValidationError(f"unknown cost {cost!r}")
    if m == k:
        r, c = linear_sum_assignment(C)
        plan = np.zeros((m, k))
        plan[r, c] = 1.0 / m
    else:
        A_eq = np.zeros((m + k, m * k))
        for i in range(m):
            A_eq[i, i * k:(i + 1) * k] = 1.0
        for j in range(k):
            A_eq[m + j, j::k] = 1.0
        b_eq = np.concatenate([np.full(m, 1.0 / m), np.full(k, 1.0 / k)])
        res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        if not res.success:
            raise NumericalError(f"LP solver failed: {res.message}")
        plan = res.x.reshape(m, k)
    return plan, float(np.sum(plan * C))


def random_directions(p: int, n_proj: int, rng: RngState) -> np.ndarray:
    u = rng.normal((n_proj, p))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_w2(xs, ys, n_proj: int = 128, rng: RngState = None) -> float:
    """Root-mean over random unit directions of the projected squared W2."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    y = y[:, None] if y.ndim == 1 else y
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValidationError("empty input")
    if x.shape[1] != y.shape[1]:
        raise ValidationError("dimension mismatch")
    if n_proj < 1:
        raise ValidationError("n_proj must be >= 1")
    if rng is None:
        rng = RngState(0, 0)
    dirs = random_directions(x.shape[1], n_proj, rng)
    px, py = x @ dirs.T, y @ dirs.T
    if x.shape[0] == y.shape[0]:
        px.sort(axis=0, kind="stable")
        py.sort(axis=0, kind="stable")
        vals = np.mean((px - py) ** 2, axis=0)
    else:
        vals = np.array([w2sq_1d(px[:, k], py[:, k]) for k in range(n_proj)])
    return float(np.sqrt(np.mean(vals)))


def default_grid(*samples, n_pts: int = 4096, pad_iqr: float = 3.0):
    pooled = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1) for s in samples])
    q1, q3 = np.percentile(pooled, [25, 75])
    iqr = max(q3 - q1, 1e-12)
    return (float(pooled.min() - pad_iqr * iqr), float(pooled.max() + pad_iqr * iqr), int(n_pts))


def grid_points(grid) -> np.ndarray:
    lo, hi, n_pts = grid
    if not hi > lo or n_pts < 2:
        raise ValidationError(f"invalid grid {grid}")
    return np.linspace(lo, hi, int(n_pts))


def _eval_density(density, pts):
    vals = density(pts) if callable(density) else np.asarray(density, dtype=np.float64)
    vals = np.asarray(vals, dtype=np.float64).reshape(-1)
    if vals.shape != pts.shape:
        raise ValidationError("density values do not match grid")
    return vals


def normalize_density(values, pts, min_mass: float = 0.5):
    """Clip negatives, check raw mass, renormalize. Returns ``(values, raw_mass)``."""
    raw_mass = float(trapezoid(values, pts))
    clipped = np.clip(values, 0.0, None)
    mass = float(trapezoid(clipped, pts))
    if not np.isfinite(raw_mass) or raw_mass < min_mass or mass <= 0:
        raise NumericalError(f"density integrates to {raw_mass:.4g} (< {min_mass}) on the grid")
    return clipped / mass, raw_mass


def w1_density_quadrature(density, reference_samples, grid=None) -> float:
    """W1 between a grid density and an empirical sample by |CDF difference| quadrature."""
    ref = np.sort(_as_1d(reference_samples, "reference_samples"), kind="stable")
    if grid is None:
        grid = default_grid(ref)
    pts = grid_points(grid)
    vals, _ = normalize_density(_eval_density(density, pts), pts)
    F = cumulative_trapezoid(vals, pts, initial=0.0)
    F /= F[-1]
    G = np.searchsorted(ref, pts, side="right") / ref.size
    w1 = float(trapezoid(np.abs(F - G), pts))
    # reference mass outside the grid
    w1 += float(np.sum(np.clip(pts[0] - ref, 0, None)) + np.sum(np.clip(ref - pts[-1], 0, None))) / ref.size
    return w1


def tv_quadrature(p_density, q_density, grid, tol: float = 1e-3) -> float:
    """Half the L1 distance between two densities on a grid (trapezoid rule)."""
    pts = grid_points(grid)
    p = _eval_density(p_density, pts)
    q = _eval_density(q_density, pts)
    for name, v in (("p", p), ("q", q)):
        mass = trapezoid(v, pts)
        if abs(mass - 1.0) > tol:
            raise NumericalError(f"{name} integrates to {mass:.6f} on the grid (tolerance {tol})")
    return float(0.5 * trapezoid(np.abs(p - q), pts))
