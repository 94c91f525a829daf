"""Experiment configuration: TOML or JSON files validated into typed records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import tomli

from ..decfm import TrainConfig
from ..designs import KINDS, ONE_D_KINDS, DesignSpec
from ..errors import ValidationError
from ..nuisance import DEFAULT_CLIP, CfmConfig, NuisanceConfig

EXPERIMENTS = ("ablation_1d", "coupling_2d", "semi_synth", "theory", "single_run")
METHODS = ("decfm_indep", "decfm_eot", "gaussian_fm", "kde", "tse")
DENSITY_METHODS = ("kde", "tse")
NUISANCE_MODES = ("holdout", "crossfit", "oracle")

DEFAULT_METHODS = {
    "ablation_1d": ("decfm_indep", "gaussian_fm"),
    "coupling_2d": ("decfm_indep", "decfm_eot"),
    "semi_synth": ("decfm_indep", "kde", "tse"),
    "single_run": ("decfm_indep",),
    "theory": (),
}
# the 1-D ablation fits nuisances on a separate sample of the same size
DEFAULT_NUISANCE_MODE = {"ablation_1d": "holdout"}


def _check_keys(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise ValidationError(f"{where}: expected a table, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {unknown}")


def _int(d: dict, key: str, default, where: str, minimum: Optional[int] = None) -> int:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValidationError(f"{where}.{key}: expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ValidationError(f"{where}.{key}: must be >= {minimum}, got {v}")
    return v


def _float(d: dict, key: str, default, where: str) -> float:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(f"{where}.{key}: expected a number, got {v!r}")
    return float(v)


def _prefixed(where: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ValidationError, TypeError) as exc:
        msg = str(exc)
        raise ValidationError(msg if msg.startswith(where) else f"{where}: {msg}") from None


@dataclass(frozen=True)
class NuisanceOptions:
    mode: str = "crossfit"
    propensity: str = "logistic"
    clip_floor: float = DEFAULT_CLIP
    quadratic: bool = True
    folds: int = 2
    pool_size: int = 64
    cfm_epochs: int = 1000
    cfm_hidden: tuple = (64,)
    cfm_lr: float = 1e-3
    cfm_batch: int = 512

    def nuisance_config(self) -> NuisanceConfig:
        cfm = CfmConfig(hidden=tuple(self.cfm_hidden), epochs=self.cfm_epochs, batch=self.cfm_batch,
                        lr=self.cfm_lr)
        return NuisanceConfig(self.propensity, self.clip_floor, self.quadratic, cfm, self.pool_size,
                              self.folds)


@dataclass(frozen=True)
class MetricOptions:
    m_eval: int = 5000
    n_reference: int = 10_000
    n_proj: int = 128
    timing: bool = True  # False writes wall_ms as 0 so result files are byte-stable


@dataclass(frozen=True)
class SemiSynthOptions:
    csv: str = ""
    covariates: tuple = ()
    treatment: str = "A"
    mechanism: str = "Gauss1D"
    K: int = 5
    train_fraction: float = 0.7


@dataclass(frozen=True)
class BaselineOptions:
    kde_bandwidth: object = "median_heuristic"
    tse_terms: int = 20
    m_cond: int = 64
    n_grid: int = 2048


@dataclass(frozen=True)
class TheoryOptions:
    slopes: tuple = (0.0, 5.0, 10.0)
    designs: tuple = ONE_D_KINDS
    n_mc: int = 1_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    design: Optional[DesignSpec] = None
    n: int = 1000
    n_trials: int = 1
    base_seed: int = 0
    methods: tuple = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    method_train: dict = field(default_factory=dict)  # method -> TrainConfig override
    nuisance: NuisanceOptions = field(default_factory=NuisanceOptions)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    semi_synth: SemiSynthOptions = field(default_factory=SemiSynthOptions)
    baselines: BaselineOptions = field(default_factory=BaselineOptions)
    theory: TheoryOptions = field(default_factory=TheoryOptions)
    output_dir: str = "results"
    source: dict = field(default_factory=dict, compare=False)

    def train_config(self, method: str) -> TrainConfig:
        return self.method_train.get(method, self.train)


def _section(raw: dict, name: str, cls):
    d = raw.get(name, {})
    allowed = [f.name for f in fields(cls)]
    _check_keys(d, allowed, name)
    out = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        default = f.default
        where = f"{name}.{f.name}"
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ValidationError(f"{where}: expected true/false, got {v!r}")
        elif isinstance(default, int):
            v = _int(d, f.name, default, name)
        elif isinstance(default, float):
            v = _float(d, f.name, default, name)
        elif isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                raise ValidationError(f"{where}: expected a list, got {v!r}")
            v = tuple(v)
        elif isinstance(default, str) and f.type == "str" and not isinstance(v, str):
            raise ValidationError(f"{where}: expected a string, got {v!r}")
        out[f.name] = v
    return cls(**out)


def _design(raw: dict, experiment: str) -> Optional[DesignSpec]:
    d = raw.get("design")
    if d is None:
        if experiment in ("theory", "semi_synth"):
            return None
        raise ValidationError("design: required for this experiment")
    if isinstance(d, str):
        d = {"kind": d}
    if not isinstance(d, dict) or "kind" not in d:
        raise ValidationError("design.kind: required")
    kind = d["kind"]
    if kind not in KINDS or kind == "SemiSynth":
        raise ValidationError(f"design.kind: unknown design {kind!r}")
    params = {k: v for k, v in d.items() if k != "kind"}
    for k, v in params.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValidationError(f"design.{k}: expected a number, got {v!r}")
    return _prefixed("design", DesignSpec, kind, {k: float(v) for k, v in params.items()})


def config_from_dict(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Validate a parsed configuration mapping; errors name the offending field path."""
    top = ["experiment", "design", "n", "n_trials", "base_seed", "methods", "train", "method_train",
           "nuisance", "metrics", "semi_synth", "baselines", "theory", "output_dir"]
    _check_keys(raw, top, "config")
    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ValidationError(f"experiment: must be one of {EXPERIMENTS}, got {experiment!r}")
    design = _design(raw, experiment)
    n = _int(raw, "n", 1000, "config", 2)
    n_trials = _int(raw, "n_trials", 1, "config", 1)
    base_seed = _int(raw, "base_seed", 0, "config", 0)
    methods = raw.get("methods", list(DEFAULT_METHODS[experiment]))
    if not isinstance(methods, (list, tuple)) or any(m not in METHODS for m in methods):
        raise ValidationError(f"methods: each entry must be one of {METHODS}, got {methods!r}")
    if len(set(methods)) != len(methods):
        raise ValidationError("methods: duplicate entries")
    methods = tuple(methods)
    train_raw = raw.get("train", {})
    _check_keys(train_raw, [f.name for f in fields(TrainConfig)], "train")
    train = _prefixed("train", TrainConfig.from_dict, train_raw)
    method_train = {}
    for m, over in raw.get("method_train", {}).items():
        if m not in METHODS:
            raise ValidationError(f"method_train.{m}: unknown method")
        _check_keys(over, [f.name for f in fields(TrainConfig)], f"method_train.{m}")
        method_train[m] = _prefixed(f"method_train.{m}", TrainConfig.from_dict, {**train_raw, **over})
    nraw = dict(raw.get("nuisance", {}))
    nraw.setdefault("mode", DEFAULT_NUISANCE_MODE.get(experiment, "crossfit"))
    nuisance = _section({"nuisance": nraw}, "nuisance", NuisanceOptions)
    if nuisance.mode not in NUISANCE_MODES:
        raise ValidationError(f"nuisance.mode: must be one of {NUISANCE_MODES}")
    if nuisance.propensity not in ("logistic", "forest"):
        raise ValidationError("nuisance.propensity: must be logistic or forest")
    if not 0.0 < nuisance.clip_floor < 0.5:
        raise ValidationError("nuisance.clip_floor: must lie in (0, 0.5)")
    if nuisance.folds < 1 or nuisance.pool_size < 1 or nuisance.cfm_epochs < 0:
        raise ValidationError("nuisance: folds and pool_size must be >= 1, cfm_epochs >= 0")
    metrics = _section(raw, "metrics", MetricOptions)
    if metrics.m_eval < 1 or metrics.n_reference < 1 or metrics.n_proj < 1:
        raise ValidationError("metrics: m_eval, n_reference and n_proj must be >= 1")
    semi = _section(raw, "semi_synth", SemiSynthOptions)
    baselines = _section(raw, "baselines", BaselineOptions)
    theory = _section(raw, "theory", TheoryOptions)
    if any(k not in ONE_D_KINDS for k in theory.designs):
        raise ValidationError(f"theory.designs: entries must be among {ONE_D_KINDS}")
    output_dir = raw.get("output_dir", "results")
    if not isinstance(output_dir, str):
        raise ValidationError("output_dir: expected a path string")

    if experiment == "semi_synth":
        if not semi.csv:
            raise ValidationError("semi_synth.csv: required for the semi_synth experiment")
        csv_path = Path(semi.csv)
        if base_dir is not None and not csv_path.is_absolute():
            csv_path = base_dir / csv_path
        if not csv_path.exists():
            raise ValidationError(f"semi_synth.csv: file not found: {csv_path}")
        semi = SemiSynthOptions(str(csv_path), tuple(semi.covariates), semi.treatment, semi.mechanism,
                                semi.K, semi.train_fraction)
        if semi.mechanism not in ONE_D_KINDS:
            raise ValidationError(f"semi_synth.mechanism: must be one of {ONE_D_KINDS}")
        if not semi.covariates:
            raise ValidationError("semi_synth.covariates: list the covariate columns")
        if not 0.0 < semi.train_fraction < 1.0:
            raise ValidationError("semi_synth.train_fraction: must lie in (0, 1)")
        if nuisance.mode == "oracle":
            raise ValidationError("nuisance.mode: oracle nuisances need a synthetic design")
    if experiment == "ablation_1d" and design.kind not in ONE_D_KINDS:
        raise ValidationError(f"design.kind: ablation_1d needs one of {ONE_D_KINDS}")
    if experiment == "coupling_2d" and design.kind != "Mixture2D":
        raise ValidationError("design.kind: coupling_2d needs Mixture2D")
    scalar = experiment == "semi_synth" or (design is not None and design.kind in ONE_D_KINDS)
    for m in methods:
        if m in DENSITY_METHODS and not scalar:
            raise ValidationError(f"methods: {m} needs scalar outcomes")
    return ExperimentConfig(experiment, design, n, n_trials, base_seed, methods, train, method_train,
                            nuisance, metrics, semi, baselines, theory, output_dir, dict(raw))


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text) if path.suffix.lower() == ".json" else tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ValidationError(f"{path}: cannot parse ({exc})") from None


def load_config(path) -> ExperimentConfig:
    """Read a ``.toml`` or ``.json`` experiment file."""
    return config_from_dict(read_config_file(path), Path(path).parent)


def training_options(raw: dict) -> tuple:
    """``(TrainConfig, NuisanceOptions)`` from the ``train``/``nuisance`` tables of ``raw``."""
    train_raw = raw.get("train", {})
    _check_keys(train_raw, [f.name for f in fields(TrainConfig)], "train")
    train = _prefixed("train", TrainConfig.from_dict, train_raw)
    nuisance = _section(raw, "nuisance", NuisanceOptions)
    if nuisance.mode != "crossfit":
        raise ValidationError("nuisance.mode: only crossfit is available when training from a file")
    return train, nuisance
