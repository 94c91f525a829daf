"""Numerical checks of structural inequalities on designs with known mechanisms.

All mixtures over the uniform covariate are computed by Gauss-Legendre
quadrature in x, so the quadrature checks are deterministic. Sample-based
checks use fixed seeds and report a bootstrap-based tolerance.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .designs import ONE_D_KINDS, DesignSpec, counterfactual_reference
from .errors import UnsupportedDesignError, ValidationError
from .metrics import w1_empirical_1d
from .numkit import RngState

log = logging.getLogger(__name__)

N_X_NODES = 256
N_QUANTILES = 100_000


@dataclass
class TheoremCheck:
    """One instance of an inequality ``lhs <= rhs`` (up to ``mc_tolerance``)."""

    name: str
    design: str
    arm: int
    lhs: float
    rhs: float
    mc_tolerance: float = 0.0
    note: str = ""

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return bool(self.lhs <= self.rhs + self.mc_tolerance)

    def row(self) -> dict:
        return {"check": self.name, "design": self.design, "arm": self.arm, "lhs": self.lhs,
                "rhs": self.rhs, "slack": self.slack, "holds": self.holds}


def _require_1d(spec: DesignSpec):
    if spec.kind not in ONE_D_KINDS:
        raise UnsupportedDesignError(f"check needs a one-dimensional design, got {spec.kind}")


def _label(spec: DesignSpec) -> str:
    return f"{spec.kind}[slope={spec.params['slope']:g}]"


def _x_nodes(n: int = N_X_NODES):
    z, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (z + 1.0), 0.5 * w


def _arm_propensity(spec: DesignSpec, x, a: int) -> np.ndarray:
    p1 = spec.propensity(x)
    return p1 if a == 1 else 1.0 - p1


def mixing_weights(spec: DesignSpec, a: int, n: int = N_X_NODES):
    """Quadrature nodes with weights for P_X and for P_{X|A=a}, plus P(A=a)."""
    x, w = _x_nodes(n)
    pa = _arm_propensity(spec, x, a)
    p_arm = float(w @ pa)
    return x, w, w * pa / p_arm, p_arm


def _y_edges(spec: DesignSpec, a: int, n_cells: int) -> np.ndarray:
    kind = spec.outcome_kind
    if kind == "Gauss1D":
        beta, sigma = spec.params["beta"], spec.params["sigma"]
        lo, hi = a + min(0.0, beta) - 9 * sigma, a + max(0.0, beta) + 9 * sigma
        return np.linspace(lo, hi, n_cells + 1)
    if kind == "MixUnif1D":
        (lo, _), (_, hi) = spec.support_1d(a)
        return np.linspace(lo - 1e-3, hi + 1e-3, n_cells + 1)
    if kind == "InvGamma1D":
        inner = np.geomspace(1e-4, 1e8, n_cells - 1)
        return np.concatenate([[0.0], inner, [np.inf]])
    raise UnsupportedDesignError(f"no outcome grid for {kind}")


def _cell_masses(spec: DesignSpec, a: int, edges, x) -> np.ndarray:
    """``(len(x), n_cells)`` conditional probabilities of each outcome cell."""
    F = spec.cond_cdf(edges[None, :], x[:, None], a)
    F[:, 0] = np.where(np.isneginf(edges[0]), 0.0, F[:, 0])
    return np.clip(np.diff(F, axis=1), 0.0, None)


def _tv_masses(p, q) -> float:
    return float(0.5 * np.abs(p - q).sum())


def mixing_tv(spec: DesignSpec, a: int, n: int = 20_001) -> float:
    """TV(P_X, P_{X|A=a}) on the unit interval by trapezoid quadrature."""
    x = np.linspace(0.0, 1.0, n)
    pa = _arm_propensity(spec, x, a)
    q = pa / trapezoid(pa, x)
    return float(0.5 * trapezoid(np.abs(1.0 - q), x))


def check_dobrushin(spec: DesignSpec, a: int, n_cells: int = 1 << 14, n_xgrid: int = 41) -> TheoremCheck:
    """TV(P_{Y(a)}, P_{Y|a}) <= sup_{x,x'} TV(P_{Y|x,a}, P_{Y|x',a}) * TV(P_X, P_{X|a}).

    TVs between outcome laws are computed from exact cell probabilities
    (CDF differences) on a fine partition of the outcome line.
    """
    _require_1d(spec)
    edges = _y_edges(spec, a, n_cells)
    x, w, wa, _ = mixing_weights(spec, a)
    cells = _cell_masses(spec, a, edges, x)
    lhs = _tv_masses(w @ cells, wa @ cells)
    xg = np.linspace(0.0, 1.0, n_xgrid)
    cg = _cell_masses(spec, a, edges, xg)
    sup_tv = max(_tv_masses(cg[i], cg[j]) for i in range(n_xgrid) for j in range(i + 1, n_xgrid))
    rhs = sup_tv * mixing_tv(spec, a)
    return TheoremCheck("dobrushin", _label(spec), a, lhs, rhs, 1e-6)


def lipschitz_constant(spec: DesignSpec) -> float:
    """W2-Lipschitz constant of x -> P_{Y|X=x,A=a} for the designs where it is finite."""
    kind = spec.outcome_kind
    if kind == "Gauss1D":
        return abs(float(spec.params["beta"]))
    if kind == "MixUnif1D":
        # quantiles move by eps*c*(x - x')*V with V ~ Unif[-1, 1]
        return spec.params["eps"] * spec.params["c"] / math.sqrt(3.0)
    raise UnsupportedDesignError(
        f"{kind} has no finite W2-Lipschitz constant; supply L explicitly")


def _mixture_quantiles(spec: DesignSpec, a: int, weights, x, u, n_grid: int = 1 << 16):
    kind = spec.outcome_kind
    if kind == "InvGamma1D":
        raise UnsupportedDesignError("quantile quadrature not available for heavy tails")
    edges = _y_edges(spec, a, n_grid)
    F = weights @ spec.cond_cdf(edges[None, :], x[:, None], a)
    F = np.maximum.accumulate(F)
    return np.interp(u, F, edges)


def _w2_1d_quantiles(q1, q2) -> float:
    return float(np.sqrt(np.mean((q1 - q2) ** 2)))


def mixing_w2(spec: DesignSpec, a: int, n_u: int = N_QUANTILES, n: int = 200_001) -> float:
    """W2(P_X, P_{X|A=a}) by quantile quadrature (P_X uniform on [0, 1])."""
    x = np.linspace(0.0, 1.0, n)
    pa = _arm_propensity(spec, x, a)
    G = cumulative_trapezoid(pa, x, initial=0.0)
    G /= G[-1]
    u = (np.arange(n_u) + 0.5) / n_u
    return _w2_1d_quantiles(u, np.interp(u, G, x))


def brenier_displacement(spec: DesignSpec, a: int, n_u: int = N_QUANTILES) -> float:
    """|f_a - id| in L2(P_{Y|a}) for the monotone map f_a from P_{Y|a} to P_{Y(a)}."""
    x, w, wa, _ = mixing_weights(spec, a)
    u = (np.arange(n_u) + 0.5) / n_u
    return _w2_1d_quantiles(_mixture_quantiles(spec, a, wa, x, u), _mixture_quantiles(spec, a, w, x, u))


def check_brenier_bound(spec: DesignSpec, a: int, n_mc: int = N_QUANTILES, L: Optional[float] = None) -> TheoremCheck:
    """|f_a - id|_{L2(P_{Y|a})} <= L_a W2(P_X, P_{X|a}), both sides by quantile quadrature."""
    _require_1d(spec)
    if spec.outcome_kind == "InvGamma1D":
        raise UnsupportedDesignError("InvGamma1D outcomes have infinite variance near x = 1, "
                                     "so the L2 displacement is undefined")
    L = lipschitz_constant(spec) if L is None else float(L)
    lhs = brenier_displacement(spec, a, n_mc)
    coarse = brenier_displacement(spec, a, max(n_mc // 2, 1))
    rhs = L * mixing_w2(spec, a, n_mc)
    return TheoremCheck("brenier", _label(spec), a, lhs, rhs, max(abs(lhs - coarse), 1e-9))


def rn_derivative(spec: DesignSpec, a: int, y) -> np.ndarray:
    """Density ratio dP_{Y(a)}/dP_{Y|a} at ``y`` (nan where P_{Y|a} has no density)."""
    x, w, wa, _ = mixing_weights(spec, a)
    dens = spec.cond_pdf(np.asarray(y)[None, :], x[:, None], a)
    num, den = w @ dens, wa @ dens
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


def check_rn_bounds(spec: DesignSpec, a: int, grid=None, eps: Optional[float] = None,
                    rtol: float = 1e-9) -> TheoremCheck:
    """P(a)/(1-eps) <= g_a(y) <= P(a)/eps on a grid, reported as ``max(lower/g, g/upper) <= 1``."""
    _require_1d(spec)
    floor = spec.positivity_floor()
    eps = floor if eps is None else float(eps)
    if not 0 < eps <= floor:
        raise ValidationError(f"eps must lie in (0, {floor:.6g}] for this design")
    if grid is None:
        e = _y_edges(spec, a, 4095)
        if not np.isfinite(e[-1]):
            e = np.linspace(1e-3, 60.0, 4096)
        grid = (float(e[0]), float(e[-1]), 4096)
    pts = np.linspace(*grid[:2], int(grid[2]))
    g = rn_derivative(spec, a, pts)
    g = g[np.isfinite(g)]
    if g.size == 0:
        raise ValidationError("grid misses the outcome support")
    _, _, _, p_arm = mixing_weights(spec, a)
    lower, upper = p_arm / (1.0 - eps), p_arm / eps
    lhs = float(max(np.max(lower / g), np.max(g / upper)))
    return TheoremCheck("rn_bounds", _label(spec), a, lhs, 1.0, rtol)


def hill_index(samples, top_frac: float = 0.01) -> float:
    """Hill estimate of the Pareto tail index from the top ``top_frac`` of positive samples."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    k = max(int(top_frac * s.size), 2)
    top = np.sort(np.partition(s, s.size - k - 1)[s.size - k - 1:])
    return float(1.0 / np.mean(np.log(top[1:] / top[0])))


def _hill_bootstrap_se(samples, top_frac, n_boot, rng: RngState) -> float:
    # only the largest order statistics can enter a resample's tail; resampling
    # counts are Poisson(1) (the multinomial limit)
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    k = max(int(top_frac * s.size), 2)
    m = min(s.size, 4 * k)
    top = np.sort(np.partition(s, s.size - m)[s.size - m:])[::-1]
    reps = []
    for _ in range(n_boot):
        counts = rng.gen.poisson(1.0, m)
        vals = np.repeat(top, counts)[: k + 1]
        reps.append(1.0 / np.mean(np.log(vals[:k] / vals[k])))
    return float(np.std(reps, ddof=1))


def check_support_tails(spec: DesignSpec, a: int, n_mc: int = 1_000_000, rng: RngState = None,
                        n_boot: int = 200) -> TheoremCheck:
    """Shared support (MixUnif1D), tail index (InvGamma1D) or sub-Gaussian maxima (Gauss1D)."""
    _require_1d(spec)
    kind = spec.outcome_kind
    label = _label(spec)
    if kind == "MixUnif1D":
        # support of P_{X|a} is the closure of {x in [0, 1]: pi_a(x) > 0}
        xg = np.linspace(0.0, 1.0, 10_001)
        pos = xg[_arm_propensity(spec, xg, a) > 0]
        x_lo, x_hi = float(pos.min()), float(pos.max())
        s_cf = spec.support_1d(a, 0.0, 1.0)
        s_obs = spec.support_1d(a, x_lo, x_hi)
        sym = sum(abs(p[0] - q[0]) + abs(p[1] - q[1]) for p, q in zip(s_cf, s_obs))
        return TheoremCheck("support", label, a, float(sym), 0.0, 0.0)
    rng = rng or RngState(0, 0)
    y_cf = counterfactual_reference(spec, a, n_mc, rng.child("cf"))[:, 0]
    y_obs = counterfactual_reference(spec, a, n_mc, rng.child("obs"), mixing="arm")[:, 0]
    if kind == "InvGamma1D":
        h_cf, h_obs = hill_index(y_cf), hill_index(y_obs)
        lhs = abs(h_cf - h_obs) / h_obs
        se = math.hypot(_hill_bootstrap_se(y_cf, 0.01, n_boot, rng.child("boot_cf")) / h_obs,
                        h_cf * _hill_bootstrap_se(y_obs, 0.01, n_boot, rng.child("boot_obs")) / h_obs ** 2)
        return TheoremCheck("tail_index", label, a, lhs, 0.25, 3 * se,
                            note=f"hill {h_cf:.3f} vs {h_obs:.3f}")
    # standardized maxima of both laws against the Gaussian sqrt(2 log n) scale
    ratios = []
    for v in (y_cf, y_obs):
        z = (v - v.mean()) / v.std()
        ratios.append(float(np.max(np.abs(z)) / math.sqrt(2.0 * math.log(v.size))))
    return TheoremCheck("sub_gaussian", label, a, max(ratios), 2.0, 0.0)


def check_feature_invariance(spec: DesignSpec, a: int, n_mc: int = 20_000, rng: RngState = None,
                             n_perm: int = 200) -> TheoremCheck:
    """phi#P_{Y(a)} = phi#P_{Y|a} on the 2-D mixture with phi(y) = (y1 + y2) / sqrt(2).

    phi projects onto the direction orthogonal to the propensity index, so it
    is unaffected by confounding. The tolerance is the 99th percentile of W1
    between random halves of the pooled projections.
    """
    if spec.kind != "Mixture2D":
        raise UnsupportedDesignError("feature check needs the 2-D mixture design")
    rng = rng or RngState(0, 0)
    proj = np.array([1.0, 1.0]) / math.sqrt(2.0)
    f_cf = counterfactual_reference(spec, a, n_mc, rng.child("cf")) @ proj
    f_obs = counterfactual_reference(spec, a, n_mc, rng.child("obs"), mixing="arm") @ proj
    lhs = w1_empirical_1d(f_cf, f_obs)
    pooled = np.concatenate([f_cf, f_obs])
    prng = rng.child("perm")
    null = []
    for _ in range(n_perm):
        perm = prng.permutation(pooled.size)
        null.append(w1_empirical_1d(pooled[perm[:n_mc]], pooled[perm[n_mc:]]))
    tol = float(np.quantile(null, 0.99))
    return TheoremCheck("feature_invariance", f"Mixture2D[gamma={spec.params['gamma']:g}]", a, lhs, 0.0, tol)


THEORY_COLUMNS = ["check", "design", "arm", "lhs", "rhs", "slack", "holds"]


def run_theory_suite(seed: int = 0, slopes=(0.0, 5.0, 10.0), designs=ONE_D_KINDS,
                     out_dir=None, n_mc: int = 1_000_000, feature_gammas=(1.0,)) -> tuple:
    """Run every applicable check; returns ``(checks, skipped)`` and writes theory_report.csv if asked.

    ``skipped`` lists ``(check, design, arm, reason)`` for combinations the
    check's contract marks unsupported.
    """
    rng = RngState(seed, 0).child("theory")
    checks, skipped = [], []
    for kind in designs:
        for slope in slopes:
            spec = DesignSpec(kind, {"slope": float(slope)})
            for a in (0, 1):
                for name, fn in (("dobrushin", lambda: check_dobrushin(spec, a)),
                                 ("brenier", lambda: check_brenier_bound(spec, a)),
                                 ("rn_bounds", lambda: check_rn_bounds(spec, a)),
                                 ("support_tails", lambda: check_support_tails(
                                     spec, a, n_mc, rng.child(kind, slope, a)))):
                    try:
                        checks.append(fn())
                    except UnsupportedDesignError as exc:
                        skipped.append((name, _label(spec), a, str(exc)))
    for gamma in feature_gammas:
        spec = DesignSpec("Mixture2D", {"gamma": float(gamma)})
        for a in (0, 1):
            checks.append(check_feature_invariance(spec, a, rng=rng.child("feature", gamma, a)))
    for c in checks:
        if not c.holds:
            log.warning("%s %s arm %d fails: lhs=%.6g rhs=%.6g tol=%.3g", c.name, c.design, c.arm,
                        c.lhs, c.rhs, c.mc_tolerance)
    if out_dir is not None:
        write_theory_report(checks, Path(out_dir) / "theory_report.csv")
    return checks, skipped


def write_theory_report(checks, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=THEORY_COLUMNS)
        w.writeheader()
        for c in checks:
            row = c.row()
            row["lhs"], row["rhs"], row["slack"] = (repr(float(row[k])) for k in ("lhs", "rhs", "slack"))
            row["holds"] = str(row["holds"]).lower()
            w.writerow(row)
    return path
