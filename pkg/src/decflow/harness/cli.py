"""Command-line entry point: ``decflow <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..checkpoint import load_checkpoint, save_checkpoint
from ..decfm import FlowModel, sample_counterfactual, train, write_loss_log
from ..designs import KINDS, DesignSpec, generate, ingest_csv, write_csv
from ..errors import DecflowError, ValidationError
from ..metrics import sliced_w2, w1_empirical_1d
from ..nuisance import fit_nuisances
from ..numkit import RngState
from ..theory import run_theory_suite
from .config import read_config_file, training_options
from .experiment import run_experiment

log = logging.getLogger("decflow")


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _design_params(pairs):
    params = {}
    for item in pairs or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValidationError(f"--param expects key=value, got {item!r}")
        try:
            params[key] = float(val)
        except ValueError:
            raise ValidationError(f"--param {key}: not a number: {val!r}") from None
    return params


def read_matrix(path) -> np.ndarray:
    """Numeric CSV (optional header row) as an ``(n, p)`` array."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"sample file not found: {path}")
    rows = np.genfromtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if rows.size and np.isnan(rows[0]).all():
        rows = rows[1:]
    if rows.size == 0:
        raise ValidationError(f"{path}: no samples")
    if not np.all(np.isfinite(rows)):
        raise ValidationError(f"{path}: non-numeric or missing values")
    return rows


def write_matrix(path, values: np.ndarray, prefix: str = "Y") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"{prefix}{j}" for j in range(values.shape[1]))
    np.savetxt(path, values, delimiter=",", header=header, comments="", fmt="%.17g")
    return path


def _default_schema(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    return {"covariates": [h for h in header if h.startswith("X")], "treatment": "A",
            "outcomes": [h for h in header if h.startswith("Y")]}


def cmd_generate(args) -> int:
    spec = DesignSpec(args.design, _design_params(args.param))
    data = generate(spec, args.n, RngState(args.seed, 0).child("generate"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, out)
    print(f"wrote {data.n} rows to {out}")
    return 0


def cmd_train(args) -> int:
    raw = read_config_file(args.config) if args.config else {}
    cfg, nopts = training_options(raw)
    if not Path(args.data).is_file():
        raise ValidationError(f"data file not found: {args.data}")
    schema = _default_schema(args.data)
    if args.covariates:
        schema["covariates"] = args.covariates.split(",")
    if args.treatment:
        schema["treatment"] = args.treatment
    if args.outcomes:
        schema["outcomes"] = args.outcomes.split(",")
    if not schema["outcomes"]:
        raise ValidationError("no outcome columns (name them Y0, Y1, ... or pass --outcomes)")
    data = ingest_csv(args.data, schema)
    rng = RngState(args.seed, 0).child("cli-train")
    nuis = fit_nuisances(data, nopts.nuisance_config(), rng.child("nuisance"))
    model = train(data, nuis, cfg, rng.child("train"))
    out = save_checkpoint(model, args.out)
    write_loss_log(model, out.with_suffix(".loss.csv"))
    print(f"saved checkpoint to {out}")
    return 0


def cmd_sample(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, FlowModel):
        raise ValidationError(f"{args.checkpoint}: not a deconfounding flow checkpoint")
    draws = sample_counterfactual(model, args.arm, args.m, RngState(args.seed, 0).child("cli-sample"))
    write_matrix(args.out, draws)
    print(f"wrote {draws.shape[0]} samples to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    xs, ys = read_matrix(args.samples_a), read_matrix(args.samples_b)
    if xs.shape[1] != ys.shape[1]:
        raise ValidationError(f"dimension mismatch: {xs.shape[1]} vs {ys.shape[1]}")
    if xs.shape[1] == 1:
        print(f"W1 = {w1_empirical_1d(xs[:, 0], ys[:, 0]):.6g}")
    else:
        rng = RngState(args.seed, 0).child("cli-evaluate")
        print(f"SW2 = {sliced_w2(xs, ys, args.n_proj, rng):.6g}")
    return 0


def cmd_benchmark(args) -> int:
    if not args.config:
        raise ValidationError("benchmark needs --config")
    paths = run_experiment(args.config, jobs=args.jobs, out_dir=args.out, base_seed=args.seed)
    for name, p in paths.items():
        if isinstance(p, Path):
            print(f"{name}: {p}")
    return 0


def cmd_theory(args) -> int:
    checks, skipped = run_theory_suite(args.seed, out_dir=args.out, n_mc=args.n_mc)
    failed = [c for c in checks if not c.holds]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks hold, {len(skipped)} skipped; "
          f"report in {Path(args.out) / 'theory_report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="decflow", description="Debiased counterfactual flows: data, training and benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic observational dataset as CSV")
    g.add_argument("--design", choices=[k for k in KINDS if k != "SemiSynth"], default="Gauss1D")
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="design parameter override")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="fit nuisances and a deconfounding flow; save a checkpoint")
    t.add_argument("data")
    t.add_argument("--covariates", help="comma-separated covariate columns (default: X*)")
    t.add_argument("--treatment", help="treatment column (default: A)")
    t.add_argument("--outcomes", help="comma-separated outcome columns (default: Y*)")
    t.add_argument("--config", help="TOML/JSON file with [train] and [nuisance] tables")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="draw counterfactual samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--arm", type=int, choices=(0, 1), required=True)
    s.add_argument("--m", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("evaluate", help="W1 (scalar) or sliced W2 between two sample files")
    e.add_argument("samples_a")
    e.add_argument("samples_b")
    e.add_argument("--n-proj", type=int, default=128)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_evaluate)

    b = sub.add_parser("benchmark", help="run an experiment from a config file")
    b.add_argument("--config")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--seed", type=int, help="override the config's base_seed")
    b.add_argument("--out", help="output directory (default: the config's output_dir)")
    b.set_defaults(fn=cmd_benchmark)

    th = sub.add_parser("theory", help="run the structural checks and write theory_report.csv")
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--n-mc", type=int, default=1_000_000)
    th.add_argument("--out", default="theory")
    th.set_defaults(fn=cmd_theory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DecflowError, OSError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
