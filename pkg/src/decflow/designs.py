"""Synthetic and semi-synthetic observational designs with known mechanisms."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .errors import UnsupportedDesignError, ValidationError
from .numkit import RngState

ONE_D_KINDS = ("Gauss1D", "InvGamma1D", "MixUnif1D")
KINDS = ONE_D_KINDS + ("Mixture2D", "SemiSynth")

_DEFAULTS = {
    "Gauss1D": {"slope": 5.0, "sigma": 1.0, "beta": 10.0},
    "InvGamma1D": {"slope": 5.0},
    "MixUnif1D": {"slope": 5.0, "c": 100.0, "eps": 0.001},
    "Mixture2D": {"gamma": 1.0, "delta": 5.0, "sigma": 0.2},
    "SemiSynth": {},
}


@dataclass
class ObservationalDataset:
    x: np.ndarray  # (n, d) covariates used for model fitting
    a: np.ndarray  # (n,) in {0, 1}
    y: np.ndarray  # (n, p)
    design: Optional["DesignSpec"] = None
    x_raw: Optional[np.ndarray] = None  # unstandardized covariates, when ingested

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.a = np.asarray(self.a).astype(np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        n = self.x.shape[0]
        if self.a.shape != (n,) or self.y.shape[0] != n:
            raise ValidationError(
                f"inconsistent row counts: x {self.x.shape}, a {self.a.shape}, y {self.y.shape}"
            )
        if not np.all((self.a == 0) | (self.a == 1)):
            raise ValidationError("treatment must be binary")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def covariates_raw(self) -> np.ndarray:
        return self.x if self.x_raw is None else self.x_raw

    def arm(self, a: int) -> np.ndarray:
        return self.y[self.a == a]

    def subset(self, idx) -> "ObservationalDataset":
        idx = np.asarray(idx)
        return ObservationalDataset(
            self.x[idx], self.a[idx], self.y[idx], self.design,
            None if self.x_raw is None else self.x_raw[idx],
        )

    def require_both_arms(self):
        counts = np.bincount(self.a, minlength=2)
        if counts.min() == 0:
            raise ValidationError(f"both treatment arms must be non-empty (counts {counts.tolist()})")


@dataclass
class DesignSpec:
    """A data-generating design.

    ``params`` holds the per-kind constants (propensity ``slope`` for the 1-D
    designs, ``gamma``/``delta``/``sigma`` for the 2-D mixture). Semi-synthetic
    specs carry the fitted covariate summary in ``mechanism``, ``selected``,
    ``phi_lo``/``phi_hi`` and ``pool`` (covariate rows defining P_X).
    """

    kind: str
    params: dict = field(default_factory=dict)
    mechanism: Optional[str] = None
    selected: Optional[np.ndarray] = None
    phi_lo: Optional[float] = None
    phi_hi: Optional[float] = None
    pool: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown design kind {self.kind!r}; expected one of {KINDS}")
        merged = dict(_DEFAULTS[self.kind])
        merged.update(self.params)
        self.params = merged
        self.validate()

    def validate(self):
        p = self.params
        if self.kind in ONE_D_KINDS and "slope" in p and not math.isfinite(p["slope"]):
            raise ValidationError("slope must be finite")
        if self.kind == "Gauss1D" and p["sigma"] <= 0:
            raise ValidationError("sigma must be positive")
        if self.kind == "MixUnif1D":
            lo = 1 - p["eps"] * (p["c"] + 1)
            if p["eps"] <= 0 or lo <= 0:
                raise ValidationError("MixUnif1D needs eps > 0 and alpha(x) > 0 on [0, 1]")
        if self.kind == "Mixture2D" and p["sigma"] <= 0:
            raise ValidationError("sigma must be positive")
        if self.kind == "SemiSynth" and self.mechanism is not None and self.mechanism not in ONE_D_KINDS:
            raise ValidationError(f"semi-synthetic mechanism must be one of {ONE_D_KINDS}")

    def with_params(self, **kw) -> "DesignSpec":
        return replace(self, params={**self.params, **kw})

    # -- propensity ---------------------------------------------------------

    @property
    def outcome_kind(self) -> str:
        return self.mechanism if self.kind == "SemiSynth" else self.kind

    def propensity(self, x) -> np.ndarray:
        """P(A=1 | X=x)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind in ONE_D_KINDS:
            x = x.reshape(-1)
            return expit(self.params["slope"] * (x - 0.5))
        if self.kind == "Mixture2D":
            w = np.array([1.0, -1.0]) / np.sqrt(2.0)
            return expit(self.params["gamma"] * (np.atleast_2d(x) @ w))
        raise UnsupportedDesignError("semi-synthetic designs have no known propensity")

    def positivity_floor(self) -> float:
        """Analytic min over x of min_a pi_a(x) (1-D designs, x in [0, 1])."""
        if self.kind not in ONE_D_KINDS:
            raise UnsupportedDesignError("analytic positivity floor only for 1-D designs")
        return float(expit(-abs(self.params["slope"]) / 2.0))

    # -- 1-D mechanism pieces ----------------------------------------------

    def _mixunif_bounds(self, u):
        c, eps = self.params.get("c", 100.0), self.params.get("eps", 0.001)
        return 1.0 - eps * (c * u + 1.0), 1.0 + eps * (c * u + 1.0)

    def _invgamma_shape_scale(self, u, a):
        return 10.0 - 8.5 * u, a + 1.0 + 10.0 * u

    def sample_outcome_1d(self, u, a, rng: RngState) -> np.ndarray:
        """Draw Y | X=u, A=a for the 1-D mechanisms (u in [0, 1])."""
        kind = self.outcome_kind
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), u.shape)
        n = u.shape[0]
        if kind == "Gauss1D":
            sigma = self.params.get("sigma", 1.0)
            return self.params.get("beta", 10.0) * u + a + sigma * rng.normal(n)
        if kind == "InvGamma1D":
            shape, scale = self._invgamma_shape_scale(u, a)
            g = rng.gamma(shape, n, scale=1.0 / scale)
            return 1.0 / g
        if kind == "MixUnif1D":
            lo, hi = self._mixunif_bounds(u)
            sign = np.where(rng.uniform(n) < 0.5, -1.0, 1.0)
            mag = lo + (hi - lo) * rng.uniform(n)
            return a + sign * mag
        raise UnsupportedDesignError(f"no 1-D mechanism for {kind!r}")

    def cond_mean(self, u, a) -> np.ndarray:
        kind = self.outcome_kind
        u = np.asarray(u, dtype=np.float64)
        if kind == "Gauss1D":
            return self.params.get("beta", 10.0) * u + a
        if kind == "InvGamma1D":
            shape, scale = self._invgamma_shape_scale(u, a)
            return scale / (shape - 1.0)
        if kind == "MixUnif1D":
            return a + 0.0 * u
        raise UnsupportedDesignError(f"no closed-form mean for {kind!r}")

    def cond_pdf(self, y, u, a) -> np.ndarray:
        """Density of Y | X=u, A=a; broadcasts ``y`` against ``u``."""
        kind = self.outcome_kind
        y = np.asarray(y, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if kind == "Gauss1D":
            return stats.norm.pdf(y, loc=self.params.get("beta", 10.0) * u + a, scale=self.params.get("sigma", 1.0))
        if kind == "InvGamma1D":
            shape, scale = self._invgamma_shape_scale(u, a)
            return stats.invgamma.pdf(y, shape, scale=scale)
        if kind == "MixUnif1D":
            lo, hi = self._mixunif_bounds(u)
            z = np.abs(y - a)
            return np.where((z >= lo) & (z <= hi), 0.5 / (hi - lo), 0.0)
        raise UnsupportedDesignError(f"no closed-form density for {kind!r}")

    def cond_cdf(self, y, u, a) -> np.ndarray:
        kind = self.outcome_kind
        y = np.asarray(y, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if kind == "Gauss1D":
            return stats.norm.cdf(y, loc=self.params.get("beta", 10.0) * u + a, scale=self.params.get("sigma", 1.0))
        if kind == "InvGamma1D":
            shape, scale = self._invgamma_shape_scale(u, a)
            return stats.invgamma.cdf(y, shape, scale=scale)
        if kind == "MixUnif1D":
            lo, hi = self._mixunif_bounds(u)
            z = y - a
            right = np.clip((z - lo) / (hi - lo), 0.0, 1.0)
            left = np.clip((z + hi) / (hi - lo), 0.0, 1.0)
            return 0.5 * left + 0.5 * right
        raise UnsupportedDesignError(f"no closed-form cdf for {kind!r}")

    def support_1d(self, a: int, x_lo=0.0, x_hi=1.0):
        """Union of conditional supports for x in [x_lo, x_hi] as a list of intervals.

        Interval arithmetic only; used for the split-support design.
        """
        if self.outcome_kind != "MixUnif1D":
            raise UnsupportedDesignError("support intervals implemented for MixUnif1D only")
        lo_a, hi_a = self._mixunif_bounds(np.array([x_lo, x_hi]))
        inner = float(min(lo_a))
        outer = float(max(hi_a))
        return [(a - outer, a - inner), (a + inner, a + outer)]

    # -- covariates ---------------------------------------------------------

    def sample_x(self, n: int, rng: RngState) -> np.ndarray:
        if self.kind in ONE_D_KINDS:
            return rng.uniform((n, 1))
        if self.kind == "Mixture2D":
            return rng.normal((n, 2))
        if self.pool is None:
            raise UnsupportedDesignError("SemiSynth spec has no attached covariate pool")
        idx = rng.integers(0, self.pool.shape[0], n)
        return self.pool[idx]

    def phi_unit(self, x_raw) -> np.ndarray:
        """Semi-synthetic covariate summary rescaled to [0, 1] (clipped)."""
        x_raw = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
        phi = x_raw[:, self.selected].sum(axis=1) / np.sqrt(len(self.selected))
        return np.clip((phi - self.phi_lo) / (self.phi_hi - self.phi_lo), 0.0, 1.0)

    def sample_outcome(self, x, a, rng: RngState) -> np.ndarray:
        """Y | X=x, A=a as an ``(n, p)`` matrix."""
        if self.kind in ONE_D_KINDS:
            return self.sample_outcome_1d(np.asarray(x)[:, 0], a, rng)[:, None]
        if self.kind == "Mixture2D":
            x = np.atleast_2d(x)
            n = x.shape[0]
            sigma, delta = self.params["sigma"], self.params["delta"]
            coin = (rng.uniform(n) < 0.5).astype(np.float64)
            noise = sigma * rng.normal((n, 2)) + coin[:, None] * delta
            return x + noise
        if self.mechanism is None or self.selected is None:
            raise UnsupportedDesignError("SemiSynth spec has no attached mechanism")
        return self.sample_outcome_1d(self.phi_unit(x), a, rng)[:, None]


def _check_n(n):
    if int(n) < 2:
        raise ValidationError(f"n must be >= 2, got {n}")


def gen_1d(spec: DesignSpec, n: int, rng: RngState) -> ObservationalDataset:
    if spec.kind not in ONE_D_KINDS:
        raise ValidationError(f"gen_1d needs one of {ONE_D_KINDS}, got {spec.kind!r}")
    _check_n(n)
    x = spec.sample_x(n, rng)
    a = (rng.uniform(n) < spec.propensity(x)).astype(np.int64)
    y = spec.sample_outcome(x, a, rng)
    return ObservationalDataset(x, a, y, spec)


def gen_2d_mixture(spec: DesignSpec, n: int, rng: RngState) -> ObservationalDataset:
    if spec.kind != "Mixture2D":
        raise ValidationError(f"gen_2d_mixture needs Mixture2D, got {spec.kind!r}")
    _check_n(n)
    x = spec.sample_x(n, rng)
    a = (rng.uniform(n) < spec.propensity(x)).astype(np.int64)
    y = spec.sample_outcome(x, a, rng)
    return ObservationalDataset(x, a, y, spec)


def generate(spec: DesignSpec, n: int, rng: RngState) -> ObservationalDataset:
    if spec.kind == "Mixture2D":
        return gen_2d_mixture(spec, n, rng)
    return gen_1d(spec, n, rng)


def _sample_x_given_arm(spec: DesignSpec, a: int, m: int, rng: RngState) -> np.ndarray:
    # rejection from P_X with acceptance pi_a(x) <= 1
    out, have = [], 0
    while have < m:
        k = max(2 * (m - have), 64)
        x = spec.sample_x(k, rng)
        p1 = spec.propensity(x)
        pa = p1 if a == 1 else 1.0 - p1
        keep = x[rng.uniform(k) < pa]
        out.append(keep)
        have += keep.shape[0]
    return np.concatenate(out)[:m]


def counterfactual_reference(spec: DesignSpec, a: int, m: int, rng: RngState,
                             mixing: str = "marginal") -> np.ndarray:
    """Exact draws from P_{Y(a)} (``mixing="marginal"``) or P_{Y|A=a} (``"arm"``)."""
    if spec.kind == "SemiSynth" and (spec.mechanism is None or spec.pool is None):
        raise UnsupportedDesignError("SemiSynth spec has no attached mechanism")
    if mixing == "marginal":
        x = spec.sample_x(m, rng)
    elif mixing == "arm":
        x = _sample_x_given_arm(spec, a, m, rng)
    else:
        raise ValidationError(f"mixing must be 'marginal' or 'arm', got {mixing!r}")
    return spec.sample_outcome(x, a, rng)


# ---------------------------------------------------------------------------
# CSV ingestion and semi-synthetic outcomes
# ---------------------------------------------------------------------------


def write_csv(data: ObservationalDataset, path, covariate_names=None, treatment="A",
              outcome_names=None):
    cov = covariate_names or [f"X{j}" for j in range(data.d)]
    out = outcome_names or [f"Y{j}" for j in range(data.p)]
    xs = data.covariates_raw
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*cov, treatment, *out])
        for i in range(data.n):
            w.writerow([*(repr(float(v)) for v in xs[i]), int(data.a[i]),
                        *(repr(float(v)) for v in data.y[i])])
    return {"covariates": cov, "treatment": treatment, "outcomes": out}


def ingest_csv(path, schema: dict, standardize: bool = True) -> ObservationalDataset:
    """Read a dataset from CSV.

    ``schema`` maps ``covariates`` (list of column names), ``treatment`` (column
    name) and optionally ``outcomes`` (list). Covariates are z-scored per column
    for model fitting when ``standardize``; raw values are kept in ``x_raw``.
    """
    if not os.path.exists(path):
        raise ValidationError(f"CSV file not found: {path}")
    cov_names = list(schema.get("covariates") or [])
    treat = schema.get("treatment")
    out_names = list(schema.get("outcomes") or [])
    if not cov_names or not treat:
        raise ValidationError("schema needs 'covariates' and 'treatment'")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in [*cov_names, treat, *out_names] if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {missing}")
        cidx = [header.index(c) for c in cov_names]
        tidx = header.index(treat)
        oidx = [header.index(c) for c in out_names]
        xs, as_, ys = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                xs.append([float(row[j]) for j in cidx])
                tv = float(row[tidx])
                ys.append([float(row[j]) for j in oidx])
            except (ValueError, IndexError):
                raise ValidationError(f"{path}: non-numeric or missing cell in data row {row_no}") from None
            if tv not in (0.0, 1.0):
                raise ValidationError(f"{path}: treatment value {row[tidx]!r} in data row {row_no} is not 0/1")
            as_.append(int(tv))
    if not xs:
        raise ValidationError(f"{path}: no data rows")
    x_raw = np.array(xs, dtype=np.float64)
    if not np.all(np.isfinite(x_raw)):
        raise ValidationError(f"{path}: non-finite covariate values")
    y = np.array(ys, dtype=np.float64).reshape(len(xs), len(oidx))
    x = x_raw
    if standardize:
        mu = x_raw.mean(axis=0)
        sd = x_raw.std(axis=0)
        sd[sd == 0] = 1.0
        x = (x_raw - mu) / sd
    return ObservationalDataset(x, np.array(as_), y, None, x_raw)


def select_confounded_features(data: ObservationalDataset, K: int):
    """Rank covariates by treated-vs-control marginal W1; return top-K and their scaled sum."""
    from .metrics import w1_empirical_1d

    xr = data.covariates_raw
    if K < 1 or K > xr.shape[1]:
        raise ValidationError(f"K must be in [1, {xr.shape[1]}], got {K}")
    t, c = data.a == 1, data.a == 0
    if not t.any() or not c.any():
        raise ValidationError("both treatment arms must be non-empty")
    scores = np.array([w1_empirical_1d(xr[t, j], xr[c, j]) for j in range(xr.shape[1])])
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    sel = np.array(order[:K], dtype=np.int64)
    phi = xr[:, sel].sum(axis=1) / np.sqrt(K)
    return sel, phi, scores


def semi_synth_outcomes(data: ObservationalDataset, mechanism: str, K: int, rng: RngState,
                        fit_rows=None) -> ObservationalDataset:
    """Replace outcomes using a 1-D mechanism driven by the confounded summary phi(X).

    Feature selection and the [0, 1] rescale are fit on ``fit_rows`` (default:
    all rows); outcomes are generated for every row. The returned dataset's
    design carries the mechanism with P_X equal to the empirical covariates.
    """
    if mechanism not in ONE_D_KINDS:
        raise ValidationError(f"mechanism must be one of {ONE_D_KINDS}")
    fit = data if fit_rows is None else data.subset(fit_rows)
    sel, phi_fit, _ = select_confounded_features(fit, K)
    lo, hi = float(phi_fit.min()), float(phi_fit.max())
    if not hi > lo:
        raise ValidationError("confounded feature summary is constant; cannot rescale")
    spec = DesignSpec("SemiSynth", {}, mechanism=mechanism, selected=sel, phi_lo=lo,
                      phi_hi=hi, pool=data.covariates_raw.copy())
    y = spec.sample_outcome(data.covariates_raw, data.a.astype(np.float64), rng)
    return ObservationalDataset(data.x, data.a, y, spec, data.x_raw)
