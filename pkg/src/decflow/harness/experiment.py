"""Trial orchestration and report writing."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..baselines import kde_aipw_density, tse_density
from ..decfm import sample_counterfactual, train
from ..designs import (DesignSpec, ObservationalDataset, counterfactual_reference, generate,
                       ingest_csv, semi_synth_outcomes)
from ..errors import ValidationError
from ..metrics import sliced_w2, w1_empirical_1d
from ..nuisance import fit_nuisances, oracle_nuisances
from ..numkit import RngState
from ..theory import run_theory_suite
from .config import DENSITY_METHODS, ExperimentConfig, load_config

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["trial_id", "seed", "method", "arm", "metric", "value", "wall_ms"]
SUMMARY_COLUMNS = ["method", "arm", "metric", "mean", "sd", "n_trials", "failures"]
FAILURE_COLUMNS = ["trial_id", "seed", "method", "error"]


def trial_rng(base_seed: int, trial_id: int) -> RngState:
    return RngState(base_seed, 0).child("trial", trial_id)


def method_train_config(cfg: ExperimentConfig, method: str):
    tc = cfg.train_config(method)
    if method == "decfm_eot":
        return replace(tc, coupling="eot")
    if method == "gaussian_fm":
        return replace(tc, coupling="independent", base_kind="std_normal")
    return replace(tc, coupling="independent")


def _trial_data(cfg: ExperimentConfig, rng: RngState, covariates: Optional[ObservationalDataset]):
    """Return ``(train_data, nuisance_holdout, spec_for_reference)``."""
    if cfg.experiment == "semi_synth":
        n_all = covariates.n
        perm = rng.child("split").permutation(n_all)
        n_train = int(round(cfg.semi_synth.train_fraction * n_all))
        tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        full = semi_synth_outcomes(covariates, cfg.semi_synth.mechanism, cfg.semi_synth.K,
                                   rng.child("outcomes"), fit_rows=tr)
        # held-out reference: P_X is the empirical law of the test-split covariates
        ref_spec = replace(full.design, pool=covariates.covariates_raw[te])
        return full.subset(tr), None, ref_spec
    data = generate(cfg.design, cfg.n, rng.child("data"))
    holdout = generate(cfg.design, cfg.n, rng.child("holdout")) if cfg.nuisance.mode == "holdout" else None
    return data, holdout, cfg.design


def _fit_trial_nuisances(cfg: ExperimentConfig, data, holdout, spec, rng: RngState):
    opts = cfg.nuisance
    if opts.mode == "oracle":
        return oracle_nuisances(data, spec, rng.child("oracle"), opts.pool_size)
    return fit_nuisances(data, opts.nuisance_config(), rng.child("nuisance"), holdout)


def _evaluate_method(cfg: ExperimentConfig, method: str, data, nuis, refs, trial: RngState) -> dict:
    """Per-arm metric values for one method."""
    mopts = cfg.metrics
    rng = trial.child("method", method)
    out = {}
    if method in DENSITY_METHODS:
        b = cfg.baselines
        for a in (0, 1):
            drng = rng.child("density", a)
            if method == "kde":
                est = kde_aipw_density(data, nuis, a, bandwidth=b.kde_bandwidth, rng=drng,
                                       m_cond=b.m_cond, n_pts=b.n_grid)
            else:
                est = tse_density(data, nuis, a, d=b.tse_terms, rng=drng, m_cond=b.m_cond, n_pts=b.n_grid)
            out[a] = ("w1", est.w1_to(refs[a][:, 0]))
        return out
    model = train(data, nuis, method_train_config(cfg, method), rng.child("train"))
    for a in (0, 1):
        draws = sample_counterfactual(model, a, mopts.m_eval, rng.child("sample", a))
        if draws.shape[1] == 1:
            out[a] = ("w1", w1_empirical_1d(draws[:, 0], refs[a][:, 0]))
        else:
            # projection directions depend only on the trial, so methods share them
            out[a] = ("sw2", sliced_w2(draws, refs[a], mopts.n_proj, trial.child("projections", a)))
    return out


def run_trial(cfg: ExperimentConfig, trial_id: int, covariates: Optional[ObservationalDataset] = None,
              methods: Optional[Sequence[str]] = None) -> tuple:
    """Run every configured method on one trial; returns ``(rows, failures)``.

    All randomness derives from ``(cfg.base_seed, trial_id)``, and every
    method draws from its own named stream, so a trial (or a single method
    within it) can be re-run in isolation with identical results.
    """
    methods = tuple(methods or cfg.methods)
    rng = trial_rng(cfg.base_seed, trial_id)
    rows, failures = [], []

    def fail(method, exc):
        log.warning("trial %d method %s failed: %s", trial_id, method, exc)
        failures.append({"trial_id": trial_id, "seed": cfg.base_seed, "method": method,
                         "error": f"{type(exc).__name__}: {exc}"})

    try:
        data, holdout, spec = _trial_data(cfg, rng, covariates)
        refs = {a: counterfactual_reference(spec, a, cfg.metrics.n_reference, rng.child("reference", a))
                for a in (0, 1)}
        nuis = _fit_trial_nuisances(cfg, data, holdout, spec, rng)
    except Exception as exc:  # a failed trial is recorded, not fatal
        for m in methods:
            fail(m, exc)
        return rows, failures
    for method in methods:
        t0 = time.perf_counter()
        try:
            values = _evaluate_method(cfg, method, data, nuis, refs, rng)
        except Exception as exc:
            fail(method, exc)
            continue
        wall = (time.perf_counter() - t0) * 1e3 if cfg.metrics.timing else 0.0
        for a in (0, 1):
            metric, value = values[a]
            rows.append({"trial_id": trial_id, "seed": cfg.base_seed, "method": method, "arm": a,
                         "metric": metric, "value": float(value), "wall_ms": wall})
    return rows, failures


def summarize(rows: list, failures: list, methods: Sequence[str]) -> list:
    """Per (method, arm, metric) mean and sample sd over successful trials.

    Alongside the two arms, an ``avg`` row summarizes the per-trial mean of
    the arm values.
    """
    failed = {m: len({f["trial_id"] for f in failures if f["method"] == m}) for m in methods}
    out = []
    for m in methods:
        mrows = [r for r in rows if r["method"] == m]
        metrics = sorted({r["metric"] for r in mrows})
        if not metrics:
            out.append({"method": m, "arm": "avg", "metric": "", "mean": float("nan"), "sd": float("nan"),
                        "n_trials": 0, "failures": failed[m]})
            continue
        for metric in metrics:
            sel = [r for r in mrows if r["metric"] == metric]
            groups = {a: [r["value"] for r in sel if r["arm"] == a] for a in (0, 1)}
            by_trial = {}
            for r in sel:
                by_trial.setdefault(r["trial_id"], []).append(r["value"])
            groups["avg"] = [float(np.mean(v)) for _, v in sorted(by_trial.items())]
            for arm, vals in groups.items():
                v = np.asarray(vals, dtype=np.float64)
                out.append({"method": m, "arm": arm, "metric": metric,
                            "mean": float(np.mean(v)) if v.size else float("nan"),
                            "sd": float(np.std(v, ddof=1)) if v.size > 1 else 0.0,
                            "n_trials": int(v.size), "failures": failed[m]})
    return out


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_rows(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            r = {k: _fmt(r[k]) for k in columns}
            if "wall_ms" in r:
                r["wall_ms"] = f"{float(r['wall_ms']):.3f}"
            w.writerow(r)
    return path


def resolve_jobs(jobs: Optional[int]) -> int:
    env = os.environ.get("DECFLOW_JOBS")
    if env:
        try:
            jobs = int(env)
        except ValueError:
            raise ValidationError(f"DECFLOW_JOBS must be an integer, got {env!r}") from None
    jobs = 1 if jobs is None else int(jobs)
    if jobs < 1:
        raise ValidationError("jobs must be >= 1")
    return jobs


def _load_covariates(cfg: ExperimentConfig) -> Optional[ObservationalDataset]:
    if cfg.experiment != "semi_synth":
        return None
    s = cfg.semi_synth
    return ingest_csv(s.csv, {"covariates": list(s.covariates), "treatment": s.treatment})


def _run_theory(cfg: ExperimentConfig, out: Path) -> dict:
    t = cfg.theory
    checks, skipped = run_theory_suite(cfg.base_seed, t.slopes, t.designs, out, t.n_mc)
    skip_path = write_rows(out / "theory_skipped.csv", ["check", "design", "arm", "reason"],
                           [dict(zip(["check", "design", "arm", "reason"], s)) for s in skipped])
    return {"theory_report": out / "theory_report.csv", "theory_skipped": skip_path,
            "all_hold": all(c.holds for c in checks)}


def run_experiment(config, jobs: Optional[int] = None, out_dir=None,
                   trial_ids: Optional[Sequence[int]] = None, base_seed: Optional[int] = None) -> dict:
    """Run an experiment described by a config path or :class:`ExperimentConfig`.

    Writes ``results.csv`` (one row per trial, method and arm),
    ``summary.csv`` and ``failures.csv`` under the output directory and
    returns their paths. ``trial_ids`` restricts the run to selected trials and
    ``base_seed`` overrides the configured seed.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    if base_seed is not None:
        cfg = replace(cfg, base_seed=int(base_seed))
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.experiment == "theory":
        return _run_theory(cfg, out)
    ids = list(range(cfg.n_trials)) if trial_ids is None else sorted(int(t) for t in trial_ids)
    covariates = _load_covariates(cfg)
    jobs = min(resolve_jobs(jobs), max(len(ids), 1))
    if jobs == 1:
        outcomes = [run_trial(cfg, t, covariates) for t in ids]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_trial, [cfg] * len(ids), ids, [covariates] * len(ids)))
    rows = [r for rs, _ in outcomes for r in rs]
    failures = [f for _, fs in outcomes for f in fs]
    paths = {
        "results": write_rows(out / "results.csv", RESULT_COLUMNS, rows),
        "summary": write_rows(out / "summary.csv", SUMMARY_COLUMNS, summarize(rows, failures, cfg.methods)),
        "failures": write_rows(out / "failures.csv", FAILURE_COLUMNS, failures),
    }
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.source, fh, indent=2, sort_keys=True, default=str)
    paths["config"] = out / "config.json"
    return paths


def read_results(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
