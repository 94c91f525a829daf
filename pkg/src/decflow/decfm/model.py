"""Deconfounding flow model: training loop and counterfactual sampling."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..designs import ObservationalDataset
from ..errors import DivergenceError, NumericalError, ValidationError
from ..nuisance import NuisanceBundle
from ..numkit import MlpParams, RngState, adam_init, adam_step, assemble_inputs, forward, init_mlp, integrate_ode
from .loss import dr_fm_step_eot, dr_fm_step_indep
from .problem import BASE_KINDS, TrainConfig, TrainingProblem, prepare_problem
from .tilt import aipw_moments, fit_tilt, random_cosine_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowModel:
    """Velocity field ``v(y, t, a)`` pushing the arm-``a`` base onto the counterfactual law.

    ``loc``/``scale`` map standardized coordinates back to outcome units;
    ``base_atoms[a]`` holds the standardized observed arm-``a`` outcomes.
    """

    velocity: MlpParams
    base_kind: str
    ode_steps: int
    loc: dict
    scale: dict
    base_atoms: dict
    loss_log: list = field(default_factory=list, compare=False)
    tilts: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.base_kind not in BASE_KINDS:
            raise ValidationError(f"base_kind must be one of {BASE_KINDS}")
        if self.velocity.ctx_dim != 0:
            raise ValidationError("deconfounding velocity takes no covariate context")

    @property
    def p(self) -> int:
        return self.velocity.y_dim

    def field_at(self, a: int):
        def v(z, t):
            out, _ = forward(self.velocity, assemble_inputs(z, t, a))
            return out
        return v

    def push(self, z0, a: int, steps: Optional[int] = None, method: str = "rk4") -> np.ndarray:
        """Map standardized base points through the flow and back to outcome units."""
        z1 = integrate_ode(self.field_at(a), z0, steps or self.ode_steps, method)
        return self.loc[a] + self.scale[a] * z1


def _fit_tilts(problem: TrainingProblem, cfg: TrainConfig, rng: RngState) -> dict:
    tilts = {}
    for arm in (0, 1):
        arng = rng.child("tilt", arm)
        fmap = random_cosine_features(problem.p, cfg.tilt_features, arng.child("features"))
        rows = np.arange(problem.n)
        y_hat = problem.plugin_draws(arm, rows, 1, arng.child("moment"))[:, 0]
        target = aipw_moments(fmap(problem.z_obs), fmap(y_hat), problem.a == arm, problem.pi(arm, rows))
        units = arng.integers(0, problem.n, cfg.tilt_reservoir)
        reservoir = problem.plugin_draws(arm, units, 1, arng.child("reservoir"))[:, 0]
        tw = fit_tilt(reservoir, fmap, target, cfg.tilt_reg, cfg.tilt_max_iters)
        if not tw.converged:
            log.warning("tilt fit for arm %d did not converge (objective %.3g)", arm, tw.objective)
        tilts[arm] = (fmap, tw)
    return tilts


def train(data: ObservationalDataset, nuisances: NuisanceBundle, cfg: Optional[TrainConfig] = None,
          rng: RngState = None, loss_log_path=None) -> FlowModel:
    """Fit the deconfounding velocity by Adam on the configured doubly robust step.

    Each epoch visits a fresh permutation of the units in minibatches of
    ``cfg.batch``. A non-finite loss or gradient raises
    :class:`DivergenceError` carrying the last finite parameters.
    """
    cfg = cfg or TrainConfig()
    if rng is None:
        raise ValidationError("rng required")
    problem = prepare_problem(data, nuisances, cfg)
    theta = init_mlp(problem.p, cfg.hidden, rng=rng.child("init"), zero=cfg.zero_init)
    if cfg.tilt:
        problem.tilts = _fit_tilts(problem, cfg, rng.child("tilt"))
    step_fn = dr_fm_step_eot if cfg.coupling == "eot" else dr_fm_step_indep
    opt = adam_init(theta, lr=cfg.lr)
    avg = theta
    n = problem.n
    B = min(cfg.batch, n)
    loss_log = []
    train_rng = rng.child("train")
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = train_rng.permutation(n)
        sums = {0: 0.0, 1: 0.0}
        n_batches = 0
        for s in range(0, n, B):
            stats = {}
            loss, grad = step_fn(theta, perm[s:s + B], problem, cfg, train_rng, stats)
            if not np.isfinite(loss) or not grad.all_finite():
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}", theta, epoch)
            try:
                opt, theta = adam_step(opt, theta, grad)
            except NumericalError as exc:
                raise DivergenceError(str(exc), theta, epoch) from exc
            if cfg.ema > 0:
                avg = MlpParams([cfg.ema * u + (1 - cfg.ema) * v for u, v in zip(avg.weights, theta.weights)],
                                [cfg.ema * u + (1 - cfg.ema) * v for u, v in zip(avg.biases, theta.biases)],
                                theta.y_dim, theta.ctx_dim, theta.activation)
            for arm in (0, 1):
                sums[arm] += stats.get(arm, 0.0)
            n_batches += 1
        wall = (time.perf_counter() - t0) * 1e3
        for arm in (0, 1):
            loss_log.append((epoch, arm, sums[arm] / n_batches, wall))
    if cfg.ema > 0:
        theta = avg
    model = FlowModel(theta, cfg.base_kind, cfg.ode_steps, problem.loc, problem.scale, problem.atoms,
                      loss_log, problem.tilts)
    if loss_log_path is not None:
        write_loss_log(model, loss_log_path)
    return model


def write_loss_log(model: FlowModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "arm", "loss", "wall_ms"])
        for epoch, arm, loss, wall in model.loss_log:
            w.writerow([epoch, arm, repr(float(loss)), f"{wall:.3f}"])
    return path


def sample_counterfactual(model: FlowModel, a: int, m: int, rng: RngState, base_source=None,
                          steps: Optional[int] = None, method: str = "rk4") -> np.ndarray:
    """Draw ``m`` counterfactual outcomes for arm ``a``.

    Base points come from ``base_source`` (an array of outcome-unit atoms
    resampled with replacement) or, by default, from the model's own base.
    """
    if a not in (0, 1):
        raise ValidationError("arm must be 0 or 1")
    if m < 0:
        raise ValidationError("m must be >= 0")
    if m == 0:
        return np.empty((0, model.p))
    if base_source is not None:
        atoms = np.asarray(base_source, dtype=np.float64).reshape(-1, model.p)
        z0 = (atoms[rng.integers(0, atoms.shape[0], m)] - model.loc[a]) / model.scale[a]
    elif model.base_kind == "std_normal":
        z0 = rng.normal((m, model.p))
    else:
        atoms = model.base_atoms[a]
        z0 = atoms[rng.integers(0, atoms.shape[0], m)]
    out = model.push(z0, a, steps, method)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite counterfactual samples")
    return out
