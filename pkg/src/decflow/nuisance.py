"""Nuisance models: propensity, fold bookkeeping, empirical bases, plug-in conditional flow."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .designs import DesignSpec, ObservationalDataset
from .errors import DivergenceError, NumericalError, ValidationError
from .numkit import (MlpParams, RngState, adam_init, adam_step, assemble_inputs, backprop,
                     forward, init_mlp, integrate_ode)

log = logging.getLogger(__name__)

DEFAULT_CLIP = 0.025


# ---------------------------------------------------------------------------
# Propensity
# ---------------------------------------------------------------------------


@dataclass
class PropensityModel:
    kind: str
    clip_floor: float
    params: dict = field(default_factory=dict)
    estimator: object = None

    def _features(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = (x - self.params["mu"]) / self.params["sd"]
        z = z[:, self.params["keep"]]
        if self.params["quadratic"]:
            z = np.concatenate([z, z * z], axis=1)
        return z

    def predict(self, x) -> np.ndarray:
        """Clipped P(A=1 | X=x)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not np.all(np.isfinite(x)):
            raise ValidationError("non-finite features")
        if self.kind == "logistic":
            z = self._features(x)
            p = expit(self.params["intercept"] + z @ self.params["coef"])
        elif self.kind == "constant":
            p = np.full(x.shape[0], self.params["p1"])
        else:
            p = self.estimator.predict_proba(x)[:, 1]
        return np.clip(p, self.clip_floor, 1.0 - self.clip_floor)

    def predict_arm(self, x, a: int) -> np.ndarray:
        p1 = self.predict(x)
        return p1 if a == 1 else 1.0 - p1

    def raw_linear_coefficients(self):
        """``(intercept, coef)`` on the original covariate scale (linear, unexpanded fits only)."""
        if self.kind != "logistic" or self.params["quadratic"]:
            raise ValidationError("raw coefficients only defined for linear logistic fits")
        coef = np.zeros(len(self.params["mu"]))
        coef[self.params["keep"]] = self.params["coef"] / self.params["sd"][self.params["keep"]]
        intercept = self.params["intercept"] - float(coef @ self.params["mu"])
        return intercept, coef


def _newton_logistic(z, a, tol=1e-8, max_iter=10_000, ridge=0.0):
    n, k = z.shape
    Z = np.concatenate([np.ones((n, 1)), z], axis=1)
    beta = np.zeros(k + 1)
    pbar = a.mean()
    beta[0] = np.log(pbar / (1 - pbar))

    def nll(b):
        s = Z @ b
        return float(np.sum(np.logaddexp(0.0, s) - a * s) + 0.5 * ridge * b[1:] @ b[1:])

    cur = nll(beta)
    for _ in range(max_iter):
        p = expit(Z @ beta)
        grad = Z.T @ (a - p) - ridge * np.r_[0.0, beta[1:]]
        if np.linalg.norm(grad) / n < tol:
            break
        H = (Z * (p * (1 - p))[:, None]).T @ Z + ridge * np.diag(np.r_[0.0, np.ones(k)])
        H += 1e-12 * np.eye(k + 1)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            val = nll(cand)
            if val <= cur + 1e-12:
                break
            t *= 0.5
        if t <= 1e-10:
            break
        beta, cur = cand, val
    return beta


def fit_propensity(data: ObservationalDataset, kind: str = "logistic", clip_floor: float = DEFAULT_CLIP,
                   rng: Optional[RngState] = None, quadratic: bool = True,
                   depth_grid=(1, 3, 5, 10), n_trees: int = 100) -> PropensityModel:
    """Fit P(A=1|X) by logistic MLE (default) or a cross-validated random forest."""
    data.require_both_arms()
    if not 0 < clip_floor < 0.5:
        raise ValidationError("clip_floor must be in (0, 0.5)")
    x = data.x
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite features")
    a = data.a.astype(np.float64)
    if kind == "logistic":
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        keep = np.flatnonzero(sd > 1e-12)
        sd = np.where(sd > 1e-12, sd, 1.0)
        model = PropensityModel("logistic", clip_floor,
                                {"mu": mu, "sd": sd, "keep": keep, "quadratic": quadratic})
        z = model._features(x)
        beta = _newton_logistic(z, a)
        model.params["intercept"] = float(beta[0])
        model.params["coef"] = beta[1:]
        return model
    if kind == "forest":
        from sklearn.ensemble import RandomForestClassifier
        from sklearn.model_selection import GridSearchCV, StratifiedKFold

        seed = int(rng.integers(0, 2**31 - 1)) if rng is not None else 0
        base = RandomForestClassifier(n_estimators=n_trees, min_samples_leaf=1, criterion="gini",
                                      random_state=seed, n_jobs=1)
        n_splits = int(min(3, np.bincount(data.a).min()))
        if n_splits >= 2:
            cv = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
            search = GridSearchCV(base, {"max_depth": list(depth_grid)}, cv=cv, scoring="neg_log_loss")
            search.fit(x, data.a)
            est = search.best_estimator_
        else:
            est = base.set_params(max_depth=max(depth_grid)).fit(x, data.a)
        return PropensityModel("forest", clip_floor, {"max_depth": est.max_depth}, est)
    raise ValidationError(f"unknown propensity kind {kind!r}")


def constant_propensity(p1: float, clip_floor: float = DEFAULT_CLIP) -> PropensityModel:
    return PropensityModel("constant", clip_floor, {"p1": float(p1)})


# ---------------------------------------------------------------------------
# Folds and empirical bases
# ---------------------------------------------------------------------------


@dataclass
class FoldAssignment:
    fold_of: np.ndarray
    K: int

    def indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def make_folds(n: int, K: int, a, rng: RngState) -> FoldAssignment:
    """Stratified random partition into K folds."""
    a = np.asarray(a).astype(np.int64)
    if K < 1:
        raise ValidationError("K must be >= 1")
    if a.shape != (n,):
        raise ValidationError("treatment vector must have length n")
    counts = np.bincount(a, minlength=2)
    if K > 1 and counts.min() < K:
        raise ValidationError(f"each arm needs at least K={K} units (counts {counts.tolist()})")
    order = np.concatenate([rng.permutation(np.flatnonzero(a == arm)) for arm in (0, 1)])
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % K
    return FoldAssignment(fold_of, K)


@dataclass
class EmpiricalBase:
    atoms: np.ndarray  # (n_a, p)
    jitter: float = 0.0

    def sample(self, m: int, rng: RngState) -> np.ndarray:
        idx = rng.integers(0, self.atoms.shape[0], m)
        out = self.atoms[idx]
        if self.jitter > 0:
            out = out + self.jitter * rng.normal(out.shape)
        return out


def empirical_base(data: ObservationalDataset, a: int, jitter: float = 0.0) -> EmpiricalBase:
    atoms = data.arm(a)
    if atoms.shape[0] == 0:
        raise ValidationError(f"arm {a} is empty")
    return EmpiricalBase(atoms.copy(), jitter)


def robust_affine(y) -> tuple:
    """Per-coordinate (median, IQR/1.349) with fallbacks for degenerate columns."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    loc = np.median(y, axis=0)
    q1, q3 = np.percentile(y, [25, 75], axis=0)
    scale = (q3 - q1) / 1.349
    sd = y.std(axis=0)
    scale = np.where(scale > 1e-12, scale, sd)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return loc, scale


# ---------------------------------------------------------------------------
# Plug-in conditional flow
# ---------------------------------------------------------------------------


@dataclass
class CfmConfig:
    hidden: tuple = (64,)
    epochs: int = 1000
    batch: int = 512
    lr: float = 1e-3
    standardize: bool = True
    ode_steps: int = 50


@dataclass
class ConditionalFlow:
    velocity: MlpParams
    base_atoms: dict  # arm -> (n_a, p) standardized atoms
    loc: dict
    scale: dict
    ode_steps: int = 50
    x_dim: int = 1
    loss_log: list = field(default_factory=list)

    @property
    def p(self) -> int:
        return self.velocity.y_dim

    def _field(self, a, ctx):
        def v(z, t):
            inp = assemble_inputs(z, t, a, None)
            inp = np.concatenate([inp, ctx], axis=1)
            out, _ = forward(self.velocity, inp)
            return out
        return v

    def push(self, z0, a: int, ctx, steps=None, method="euler"):
        """Integrate standardized base points ``z0`` (N, p) under contexts ``ctx`` (N, d)."""
        z1 = integrate_ode(self._field(a, ctx), z0, steps or self.ode_steps, method)
        return self.loc[a] + self.scale[a] * z1


def fit_plugin_cfm(data: ObservationalDataset, config: Optional[CfmConfig] = None,
                   rng: RngState = None) -> ConditionalFlow:
    """Train v(y, t, x, a) mapping the empirical arm base to Y | X, A by flow matching."""
    cfg = config or CfmConfig()
    data.require_both_arms()
    n, p, d = data.n, data.p, data.d
    loc, scale, atoms = {}, {}, {}
    z = np.empty_like(data.y)
    for arm in (0, 1):
        m = data.a == arm
        if cfg.standardize:
            loc[arm], scale[arm] = robust_affine(data.y[m])
        else:
            loc[arm], scale[arm] = np.zeros(p), np.ones(p)
        z[m] = (data.y[m] - loc[arm]) / scale[arm]
        atoms[arm] = z[m].copy()
    params = init_mlp(p, cfg.hidden, ctx_dim=d, rng=rng.child("init"))
    flow = ConditionalFlow(params, atoms, loc, scale, cfg.ode_steps, d)
    if cfg.epochs <= 0:
        return flow
    opt = adam_init(params, lr=cfg.lr)
    arm_idx = {arm: np.flatnonzero(data.a == arm) for arm in (0, 1)}
    train_rng = rng.child("train")
    B = min(cfg.batch, n)
    for epoch in range(cfg.epochs):
        perm = train_rng.permutation(n)
        ep_loss = 0.0
        for s in range(0, n, B):
            idx = perm[s:s + B]
            nb = idx.size
            a_b = data.a[idx]
            z0 = np.empty((nb, p))
            for arm in (0, 1):
                sel = a_b == arm
                k = int(sel.sum())
                if k:
                    z0[sel] = atoms[arm][train_rng.integers(0, atoms[arm].shape[0], k)]
            t = train_rng.uniform(nb)
            z1 = z[idx]
            zt = (1.0 - t)[:, None] * z0 + t[:, None] * z1
            inp = np.concatenate([zt, t[:, None], a_b[:, None].astype(np.float64), data.x[idx]], axis=1)
            out, cache = forward(params, inp)
            resid = out - (z1 - z0)
            loss = float(np.sum(resid * resid) / nb)
            if not np.isfinite(loss):
                raise DivergenceError(f"plug-in flow loss non-finite at epoch {epoch}", params, epoch)
            grad = backprop(params, inp, (2.0 / nb) * resid, cache)
            opt, params = adam_step(opt, params, grad)
            ep_loss += loss * nb
        flow.loss_log.append(ep_loss / n)
    flow.velocity = params
    return flow


def sample_conditional(flow: ConditionalFlow, x, a: int, m: int, rng: RngState,
                       steps: Optional[int] = None, method: str = "rk4") -> np.ndarray:
    """Draw m samples from the fitted Y | X=x, A=a."""
    if m == 0:
        return np.empty((0, flow.p))
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    atoms = flow.base_atoms[a]
    z0 = atoms[rng.integers(0, atoms.shape[0], m)]
    out = flow.push(z0, a, np.repeat(x, m, axis=0), steps, method)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite conditional samples")
    return out


def sample_conditional_batch(flow: ConditionalFlow, X, a: int, m: int, rng: RngState,
                             steps: Optional[int] = None, method: str = "euler",
                             chunk: int = 65536) -> np.ndarray:
    """``m`` draws for every row of ``X``; returns ``(N, m, p)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N = X.shape[0]
    atoms = flow.base_atoms[a]
    z0 = atoms[rng.integers(0, atoms.shape[0], N * m)]
    ctx = np.repeat(X, m, axis=0)
    out = np.empty((N * m, flow.p))
    for s in range(0, N * m, chunk):
        out[s:s + chunk] = flow.push(z0[s:s + chunk], a, ctx[s:s + chunk], steps, method)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite conditional samples")
    return out.reshape(N, m, flow.p)


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------


@dataclass
class NuisanceBundle:
    """Everything the debiased estimators need about one evaluation dataset.

    ``pi1[i]`` and ``pool[a][i]`` come from a model whose training data
    excluded unit i (cross-fitting or a separate hold-out sample).
    ``pool[a]`` is an ``(n, R, p)`` reservoir of plug-in draws from
    P_hat(Y | X_i, A=a).
    """

    pi1: np.ndarray
    pool: dict
    folds: Optional[FoldAssignment] = None
    propensity_models: list = field(default_factory=list)
    flows: list = field(default_factory=list)
    mode: str = "crossfit"
    trained_on: Optional[list] = None  # per model: indices of training units (crossfit)

    def pi(self, a: int, rows=None) -> np.ndarray:
        p1 = self.pi1 if rows is None else self.pi1[rows]
        return p1 if a == 1 else 1.0 - p1

    def plugin_draws(self, a: int, rows, M: int, rng: RngState) -> np.ndarray:
        """M draws per row from the plug-in reservoir; ``(len(rows), M, p)``."""
        pool = self.pool[a]
        rows = np.asarray(rows)
        cols = rng.integers(0, pool.shape[1], (rows.size, M))
        return pool[rows[:, None], cols]


@dataclass
class NuisanceConfig:
    propensity: str = "logistic"
    clip_floor: float = DEFAULT_CLIP
    quadratic: bool = True
    cfm: CfmConfig = field(default_factory=CfmConfig)
    pool_size: int = 64
    folds: int = 2


def _pool_for(flow, X, R, rng, steps):
    return {a: sample_conditional_batch(flow, X, a, R, rng.child("pool", a), steps, "euler")
            for a in (0, 1)}


def fit_nuisances(data: ObservationalDataset, cfg: Optional[NuisanceConfig] = None,
                  rng: RngState = None, holdout: Optional[ObservationalDataset] = None) -> NuisanceBundle:
    """Fit nuisances for ``data`` by K-fold cross-fitting, or on a separate ``holdout`` sample."""
    cfg = cfg or NuisanceConfig()
    data.require_both_arms()
    n = data.n
    if holdout is not None:
        prop = fit_propensity(holdout, cfg.propensity, cfg.clip_floor, rng.child("prop"), cfg.quadratic)
        flow = fit_plugin_cfm(holdout, cfg.cfm, rng.child("cfm"))
        pool = _pool_for(flow, data.x, cfg.pool_size, rng.child("pool"), cfg.cfm.ode_steps)
        return NuisanceBundle(prop.predict(data.x), pool, None, [prop], [flow], "holdout")
    folds = make_folds(n, cfg.folds, data.a, rng.child("folds"))
    pi1 = np.empty(n)
    pool = {a: np.empty((n, cfg.pool_size, data.p)) for a in (0, 1)}
    props, flows, trained_on = [], [], []
    for k in range(cfg.folds):
        ev = folds.indices(k)
        tr = folds.complement(k) if cfg.folds > 1 else ev
        train = data.subset(tr)
        frng = rng.child("fold", k)
        prop = fit_propensity(train, cfg.propensity, cfg.clip_floor, frng.child("prop"), cfg.quadratic)
        flow = fit_plugin_cfm(train, cfg.cfm, frng.child("cfm"))
        pi1[ev] = prop.predict(data.x[ev])
        fold_pool = _pool_for(flow, data.x[ev], cfg.pool_size, frng.child("pool"), cfg.cfm.ode_steps)
        for a in (0, 1):
            pool[a][ev] = fold_pool[a]
        props.append(prop)
        flows.append(flow)
        trained_on.append(tr)
    return NuisanceBundle(pi1, pool, folds, props, flows, "crossfit", trained_on)


def oracle_nuisances(data: ObservationalDataset, spec: DesignSpec, rng: RngState,
                     pool_size: int = 64, shift: float = 0.0, propensity=None) -> NuisanceBundle:
    """Nuisances from the true design: exact propensity and exact conditional draws.

    ``shift`` adds a constant to every plug-in draw (a deliberately wrong
    outcome model); ``propensity`` overrides the true P(A=1|X) with a vector.
    """
    n = data.n
    pi1 = spec.propensity(data.x) if propensity is None else np.asarray(propensity, dtype=np.float64)
    X = np.repeat(data.x, pool_size, axis=0)
    pool = {}
    for a in (0, 1):
        draws = spec.sample_outcome(X, float(a), rng.child("oracle_pool", a))
        pool[a] = draws.reshape(n, pool_size, -1) + shift
    return NuisanceBundle(np.asarray(pi1, dtype=np.float64), pool, None, [], [], "oracle")
