"""Training configuration and the standardized view of data plus nuisances used by the step estimators."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from ..designs import ObservationalDataset
from ..errors import ValidationError
from ..nuisance import NuisanceBundle, robust_affine
from ..numkit import RngState

BASE_KINDS = ("empirical_arm", "std_normal")
COUPLINGS = ("independent", "eot")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 1000
    batch: int = 512
    M: int = 8
    M0: int = 1
    K: int = 4
    sinkhorn_eps: float = 0.1
    sinkhorn_iters: int = 50
    sinkhorn_polish: bool = False  # Newton refinement until marginals match to 1e-6
    eps_mode: str = "auto"  # absolute for p <= 8, relative otherwise
    coupling: str = "independent"
    tilt: bool = False
    tilt_reg: float = 1e-3
    tilt_features: int = 128
    tilt_reservoir: int = 4096
    tilt_max_iters: int = 2000
    hidden: tuple = (64,)
    base_kind: str = "empirical_arm"
    standardize: bool = True
    ode_steps: int = 50
    zero_init: bool = False
    ema: float = 0.0  # decay of the parameter average returned by train (0 = last iterate)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("epochs",):
            if getattr(self, name) < 0:
                raise ValidationError(f"train.{name} must be >= 0")
        for name in ("batch", "M", "M0", "K", "sinkhorn_iters", "tilt_features", "tilt_reservoir",
                     "ode_steps", "tilt_max_iters"):
            if getattr(self, name) < 1:
                raise ValidationError(f"train.{name} must be >= 1")
        if self.K > self.M:
            raise ValidationError(f"train.K ({self.K}) must not exceed train.M ({self.M})")
        if not self.sinkhorn_eps > 0:
            raise ValidationError("train.sinkhorn_eps must be > 0")
        if not self.lr > 0:
            raise ValidationError("train.lr must be > 0")
        if not 0.0 <= self.ema < 1.0:
            raise ValidationError("train.ema must lie in [0, 1)")
        if self.tilt_reg < 0:
            raise ValidationError("train.tilt_reg must be >= 0")
        if self.coupling not in COUPLINGS:
            raise ValidationError(f"train.coupling must be one of {COUPLINGS}")
        if self.base_kind not in BASE_KINDS:
            raise ValidationError(f"train.base_kind must be one of {BASE_KINDS}")
        if self.eps_mode not in ("auto", "absolute", "relative"):
            raise ValidationError("train.eps_mode must be auto, absolute or relative")
        if not self.hidden or min(self.hidden) < 1:
            raise ValidationError("train.hidden must list positive widths")

    def eps_mode_for(self, p: int) -> str:
        if self.eps_mode != "auto":
            return self.eps_mode
        return "absolute" if p <= 8 else "relative"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train options: {sorted(unknown)}")
        d = dict(d)
        if "tilt" in d and isinstance(d["tilt"], str):
            d["tilt"] = d["tilt"] == "on"
        return cls(**d)


@dataclass
class TrainingProblem:
    """Outcomes, weights and plug-in draws in per-arm standardized coordinates.

    Arm ``a`` quantities (observed outcomes of arm-``a`` units, plug-in draws
    for arm ``a``, the arm-``a`` base) all use the arm-``a`` affine map
    ``z = (y - loc[a]) / scale[a]``.
    """

    a: np.ndarray
    z_obs: np.ndarray
    pi1: np.ndarray
    pool: dict
    atoms: dict
    loc: dict
    scale: dict
    base_kind: str = "empirical_arm"
    tilts: dict = field(default_factory=dict)  # arm -> (FeatureMap, TiltWeights)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def p(self) -> int:
        return self.z_obs.shape[1]

    def pi(self, arm: int, rows) -> np.ndarray:
        p1 = self.pi1[rows]
        return p1 if arm == 1 else 1.0 - p1

    def base_draws(self, arm: int, m: int, rng: RngState) -> np.ndarray:
        if self.base_kind == "std_normal":
            return rng.normal((m, self.p))
        atoms = self.atoms[arm]
        return atoms[rng.integers(0, atoms.shape[0], m)]

    def plugin_draws(self, arm: int, rows, M: int, rng: RngState) -> np.ndarray:
        pool = self.pool[arm]
        rows = np.asarray(rows)
        cols = rng.integers(0, pool.shape[1], (rows.size, M))
        return pool[rows[:, None], cols]


def prepare_problem(data: ObservationalDataset, nuisances: NuisanceBundle,
                    cfg: Optional[TrainConfig] = None) -> TrainingProblem:
    cfg = cfg or TrainConfig()
    data.require_both_arms()
    n, p = data.n, data.p
    if nuisances.pi1.shape != (n,):
        raise ValidationError("nuisance propensities do not match the data")
    if not np.all((nuisances.pi1 > 0) & (nuisances.pi1 < 1)):
        raise ValidationError("propensities must lie strictly inside (0, 1)")
    z = np.empty_like(data.y)
    loc, scale, atoms, pool = {}, {}, {}, {}
    for arm in (0, 1):
        m = data.a == arm
        if nuisances.pool[arm].shape[:1] != (n,) or nuisances.pool[arm].shape[2] != p:
            raise ValidationError(f"plug-in pool for arm {arm} has shape {nuisances.pool[arm].shape}")
        if cfg.standardize:
            loc[arm], scale[arm] = robust_affine(data.y[m])
        else:
            loc[arm], scale[arm] = np.zeros(p), np.ones(p)
        z[m] = (data.y[m] - loc[arm]) / scale[arm]
        atoms[arm] = z[m].copy()
        pool[arm] = (nuisances.pool[arm] - loc[arm]) / scale[arm]
    return TrainingProblem(data.a.astype(np.int64), z, nuisances.pi1.astype(np.float64), pool,
                           atoms, loc, scale, cfg.base_kind)
