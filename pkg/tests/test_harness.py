import csv
import json

import numpy as np
import pytest

import decflow.harness.experiment as exp_mod
from decflow.designs import DesignSpec
from decflow.errors import NumericalError, ValidationError
from decflow.harness import cli
from decflow.harness.config import config_from_dict, load_config
from decflow.harness.experiment import (RESULT_COLUMNS, SUMMARY_COLUMNS, read_results, resolve_jobs,
                                        run_experiment, run_trial, summarize)

SMALL = {
    "experiment": "ablation_1d",
    "design": {"kind": "Gauss1D"},
    "n": 150,
    "n_trials": 2,
    "base_seed": 3,
    "methods": ["decfm_indep", "kde"],
    "train": {"epochs": 3, "batch": 64, "hidden": [8], "ode_steps": 10},
    "nuisance": {"mode": "oracle", "pool_size": 4},
    "baselines": {"m_cond": 4, "n_grid": 256},
    "metrics": {"m_eval": 300, "n_reference": 500, "timing": False},
}


def _cfg(**over):
    raw = json.loads(json.dumps(SMALL))
    for k, v in over.items():
        raw[k] = v
    return raw


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- configuration ----------------------------------------------------------------------

def test_defaults_follow_experiment_kind():
    c = config_from_dict({"experiment": "ablation_1d", "design": "Gauss1D"})
    assert c.methods == ("decfm_indep", "gaussian_fm") and c.nuisance.mode == "holdout"
    assert config_from_dict({"experiment": "coupling_2d", "design": "Mixture2D"}).nuisance.mode == "crossfit"
    assert config_from_dict({"experiment": "theory"}).design is None


@pytest.mark.parametrize("raw, path", [
    ({"experiment": "nope"}, "experiment"),
    ({"experiment": "ablation_1d"}, "design"),
    ({"experiment": "ablation_1d", "design": {"kind": "Gauss9"}}, "design.kind"),
    ({"experiment": "ablation_1d", "design": {"kind": "Gauss1D", "slope": "x"}}, "design.slope"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "n_trials": 0}, "config.n_trials"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "n": 2.5}, "config.n"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "train": {"lr": -1.0}}, "train.lr"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "train": {"wat": 1}}, "train"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "nuisance": {"clip_floor": 0.7}}, "nuisance.clip_floor"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "metrics": {"timing": 1}}, "metrics.timing"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "methods": ["magic"]}, "methods"),
    ({"experiment": "ablation_1d", "design": "Mixture2D"}, "design.kind"),
    ({"experiment": "coupling_2d", "design": "Mixture2D", "methods": ["kde"]}, "methods"),
    ({"experiment": "semi_synth"}, "semi_synth.csv"),
    ({"experiment": "semi_synth", "semi_synth": {"csv": "/no/such.csv"}}, "semi_synth.csv"),
    ({"experiment": "theory", "theory": {"designs": ["Mixture2D"]}}, "theory.designs"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "method_train": {"kde2": {}}}, "method_train.kde2"),
    ({"experiment": "ablation_1d", "design": "Gauss1D", "bogus": 1}, "config"),
])
def test_validation_errors_name_the_field(raw, path):
    with pytest.raises(ValidationError) as info:
        config_from_dict(raw)
    assert str(info.value).startswith(path)


def test_toml_and_json_files_load_identically(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('experiment = "ablation_1d"\nn = 300\n[design]\nkind = "MixUnif1D"\nslope = 10\n'
                    '[train]\nepochs = 5\nhidden = [16, 16]\n')
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"experiment": "ablation_1d", "n": 300, "design": {"kind": "MixUnif1D", "slope": 10},
                              "train": {"epochs": 5, "hidden": [16, 16]}}))
    a, b = load_config(toml), load_config(js)
    assert a == b
    assert a.design == DesignSpec("MixUnif1D", {"slope": 10.0}) and a.train.hidden == (16, 16)
    with pytest.raises(ValidationError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("experiment = \n")
    with pytest.raises(ValidationError, match="parse"):
        load_config(bad)


def test_method_specific_training_overrides():
    c = config_from_dict(_cfg(method_train={"decfm_indep": {"hidden": [4]}}))
    assert c.train_config("decfm_indep").hidden == (4,)
    assert c.train_config("decfm_indep").epochs == 3
    assert c.train_config("kde").hidden == (8,)


def test_jobs_environment_override(monkeypatch):
    monkeypatch.delenv("DECFLOW_JOBS", raising=False)
    assert resolve_jobs(None) == 1 and resolve_jobs(3) == 3
    monkeypatch.setenv("DECFLOW_JOBS", "2")
    assert resolve_jobs(5) == 2
    monkeypatch.setenv("DECFLOW_JOBS", "two")
    with pytest.raises(ValidationError):
        resolve_jobs(1)
    monkeypatch.setenv("DECFLOW_JOBS", "0")
    with pytest.raises(ValidationError):
        resolve_jobs(1)


# -- experiments ------------------------------------------------------------------------

def test_experiment_writes_schema_and_one_row_per_trial_method_arm(tmp_path):
    paths = run_experiment(config_from_dict(_cfg()), out_dir=tmp_path)
    rows = _read(paths["results"])
    assert list(rows[0]) == RESULT_COLUMNS
    keys = [(int(r["trial_id"]), r["method"], int(r["arm"])) for r in rows]
    assert sorted(keys) == sorted((t, m, a) for t in (0, 1) for m in ("decfm_indep", "kde") for a in (0, 1))
    assert all(float(r["value"]) >= 0 and r["metric"] == "w1" and r["seed"] == "3" for r in rows)
    assert list(_read(paths["summary"])[0]) == SUMMARY_COLUMNS
    assert _read(paths["failures"]) == []
    assert json.loads(paths["config"].read_text())["n"] == 150


def test_summary_means_equal_row_means(tmp_path):
    paths = run_experiment(config_from_dict(_cfg(n_trials=3)), out_dir=tmp_path)
    rows, summary = _read(paths["results"]), _read(paths["summary"])
    for s in summary:
        sel = [r for r in rows if r["method"] == s["method"] and r["metric"] == s["metric"]]
        if s["arm"] == "avg":
            vals = [np.mean([float(r["value"]) for r in sel if r["trial_id"] == t])
                    for t in sorted({r["trial_id"] for r in sel})]
        else:
            vals = [float(r["value"]) for r in sel if r["arm"] == s["arm"]]
        assert abs(float(s["mean"]) - float(np.mean(vals))) <= 1e-12
        assert int(s["n_trials"]) == len(vals) == 3 and s["failures"] == "0"
        assert float(s["sd"]) == pytest.approx(float(np.std(vals, ddof=1)), rel=1e-12)


def test_failed_trials_are_recorded_and_excluded(tmp_path, monkeypatch):
    real = exp_mod._evaluate_method

    def flaky(cfg, method, data, nuis, refs, trial):
        if method == "kde" and trial.stream_id == exp_mod.trial_rng(cfg.base_seed, 1).stream_id:
            raise FloatingPointError("injected")
        return real(cfg, method, data, nuis, refs, trial)

    monkeypatch.setattr(exp_mod, "_evaluate_method", flaky)
    paths = run_experiment(config_from_dict(_cfg(n_trials=3)), out_dir=tmp_path)
    fails = _read(paths["failures"])
    assert [(f["trial_id"], f["method"]) for f in fails] == [("1", "kde")]
    assert "injected" in fails[0]["error"]
    rows = _read(paths["results"])
    for s in _read(paths["summary"]):
        kde_rows = [float(r["value"]) for r in rows if r["method"] == "kde" and r["arm"] == s["arm"]]
        if s["method"] == "kde":
            assert s["failures"] == "1" and int(s["n_trials"]) == 2
            if s["arm"] != "avg":
                assert abs(float(s["mean"]) - np.mean(kde_rows)) <= 1e-12
        else:
            assert s["failures"] == "0" and int(s["n_trials"]) == 3


def test_failed_data_stage_marks_every_method(monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("no data")

    monkeypatch.setattr(exp_mod, "_trial_data", broken)
    rows, fails = run_trial(config_from_dict(_cfg()), 0)
    assert rows == [] and {f["method"] for f in fails} == {"decfm_indep", "kde"}


def test_summary_of_all_failed_method():
    out = summarize([], [{"trial_id": 0, "method": "kde"}], ["kde"])
    assert out[0]["failures"] == 1 and out[0]["n_trials"] == 0 and np.isnan(out[0]["mean"])


def test_reruns_are_byte_identical(tmp_path):
    cfg = config_from_dict(_cfg())
    p1 = run_experiment(cfg, out_dir=tmp_path / "a")
    p2 = run_experiment(cfg, out_dir=tmp_path / "b")
    for key in ("results", "summary", "failures"):
        assert p1[key].read_bytes() == p2[key].read_bytes()


def test_single_trial_rerun_reproduces_its_rows(tmp_path):
    cfg = config_from_dict(_cfg(n_trials=3))
    full = read_results(run_experiment(cfg, out_dir=tmp_path / "full")["results"])
    alone = read_results(run_experiment(cfg, out_dir=tmp_path / "one", trial_ids=[2])["results"])
    assert alone == [r for r in full if r["trial_id"] == "2"]
    direct, _ = run_trial(cfg, 2)
    assert [repr(r["value"]) for r in direct] == [r["value"] for r in alone]


def test_parallel_trials_match_sequential(tmp_path):
    cfg = config_from_dict(_cfg(methods=["kde"]))
    seq = run_experiment(cfg, out_dir=tmp_path / "s", jobs=1)["results"].read_bytes()
    par = run_experiment(cfg, out_dir=tmp_path / "p", jobs=2)["results"].read_bytes()
    assert seq == par


def test_coupling_experiment_reports_sliced_w2(tmp_path):
    raw = _cfg(experiment="coupling_2d", design={"kind": "Mixture2D"}, n_trials=1,
               methods=["decfm_indep", "decfm_eot"])
    rows = _read(run_experiment(config_from_dict(raw), out_dir=tmp_path)["results"])
    assert {r["metric"] for r in rows} == {"sw2"} and len(rows) == 4


def test_semi_synthetic_experiment_runs_on_covariate_file(tmp_path):
    r = np.random.default_rng(0)
    n = 200
    x = r.normal(size=(n, 3))
    a = (r.uniform(size=n) < 1 / (1 + np.exp(-x[:, 0]))).astype(int)
    path = tmp_path / "cov.csv"
    np.savetxt(path, np.column_stack([x, a]), delimiter=",", header="X0,X1,X2,A", comments="", fmt="%.10g")
    raw = _cfg(experiment="semi_synth", semi_synth={"csv": "cov.csv", "covariates": ["X0", "X1", "X2"], "K": 2},
               nuisance={"mode": "crossfit", "pool_size": 4, "cfm_epochs": 2, "cfm_hidden": [8]})
    raw.pop("design")
    cfg_path = tmp_path / "semi.json"
    cfg_path.write_text(json.dumps(raw))
    paths = run_experiment(cfg_path, out_dir=tmp_path / "out")
    rows = _read(paths["results"])
    assert _read(paths["failures"]) == []
    assert len(rows) == 2 * 2 * 2 and all(np.isfinite(float(r["value"])) for r in rows)


# -- command line -----------------------------------------------------------------------

def test_cli_theory_writes_report(tmp_path, capsys):
    out = tmp_path / "d"
    assert cli.main(["theory", "--seed", "1", "--n-mc", "20000", "--out", str(out)]) == 0
    assert (out / "theory_report.csv").is_file()
    assert "checks hold" in capsys.readouterr().out


def test_cli_evaluate_identical_files_prints_zero(tmp_path, capsys):
    p = tmp_path / "a.csv"
    np.savetxt(p, np.arange(10.0)[:, None], delimiter=",", header="Y0", comments="")
    assert cli.main(["evaluate", str(p), str(p)]) == 0
    assert capsys.readouterr().out.strip() == "W1 = 0"
    q = tmp_path / "b.csv"
    np.savetxt(q, np.ones((5, 2)), delimiter=",")
    assert cli.main(["evaluate", str(q), str(q)]) == 0
    assert capsys.readouterr().out.strip() == "SW2 = 0"
    assert cli.main(["evaluate", str(p), str(q)]) == 1


def test_cli_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "missing.toml"
    assert cli.main(["benchmark", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_cli_usage_errors_exit_one(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.main([]) == 1
    assert cli.main(["generate", "--out", "x.csv", "--param", "slope"]) == 1


def test_cli_runtime_failure_exits_two(monkeypatch):
    def boom(args):
        raise NumericalError("diverged")

    parser = cli.build_parser
    monkeypatch.setattr(cli, "build_parser", lambda: _with_fn(parser(), "evaluate", boom))
    assert cli.main(["evaluate", "a", "b"]) == 2


def _with_fn(parser, name, fn):
    for action in parser._subparsers._group_actions:
        action.choices[name].set_defaults(fn=fn)
    return parser


def test_cli_generate_train_sample_round_trip(tmp_path, capsys):
    data = tmp_path / "obs.csv"
    assert cli.main(["generate", "--design", "Gauss1D", "--param", "slope=2", "--n", "120", "--seed", "4",
                     "--out", str(data)]) == 0
    conf = tmp_path / "t.toml"
    conf.write_text("[train]\nepochs = 2\nbatch = 60\nhidden = [8]\node_steps = 5\n"
                    "[nuisance]\npool_size = 4\ncfm_epochs = 2\ncfm_hidden = [8]\n")
    ckpt = tmp_path / "m.npz"
    assert cli.main(["train", str(data), "--config", str(conf), "--out", str(ckpt)]) == 0
    assert ckpt.is_file() and ckpt.with_suffix(".loss.csv").is_file()
    s1, s2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    assert cli.main(["sample", str(ckpt), "--arm", "1", "--m", "50", "--out", str(s1)]) == 0
    assert cli.main(["sample", str(ckpt), "--arm", "1", "--m", "50", "--out", str(s2)]) == 0
    assert s1.read_bytes() == s2.read_bytes()
    assert cli.read_matrix(s1).shape == (50, 1)
    capsys.readouterr()
    assert cli.main(["evaluate", str(s1), str(s2)]) == 0
    assert capsys.readouterr().out.strip() == "W1 = 0"


def test_cli_benchmark_runs_config(tmp_path, capsys):
    conf = tmp_path / "b.json"
    conf.write_text(json.dumps(_cfg(n_trials=1, methods=["kde"])))
    assert cli.main(["benchmark", "--config", str(conf), "--out", str(tmp_path / "r"), "--seed", "9"]) == 0
    rows = _read(tmp_path / "r" / "results.csv")
    assert {r["seed"] for r in rows} == {"9"}
