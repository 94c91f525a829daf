import csv

import numpy as np
import pytest

import decflow.decfm.model as model_mod
from decflow.checkpoint import load_checkpoint, save_checkpoint
from decflow.decfm import TrainConfig, sample_counterfactual, train
from decflow.decfm.model import FlowModel
from decflow.designs import DesignSpec, gen_1d, gen_2d_mixture
from decflow.errors import DivergenceError, NumericalError, ValidationError
from decflow.nuisance import CfmConfig, fit_plugin_cfm, oracle_nuisances, sample_conditional
from decflow.numkit import RngState, init_mlp


def _setup(kind="Gauss1D", n=200, seed=0, params=None):
    spec = DesignSpec(kind, params or {})
    r = RngState(seed, 0)
    data = gen_2d_mixture(spec, n, r.child("data")) if kind == "Mixture2D" else gen_1d(spec, n, r.child("data"))
    return spec, data, oracle_nuisances(data, spec, r.child("oracle"), 8)


def test_zero_epochs_keep_initial_parameters():
    _, data, nuis = _setup()
    cfg = TrainConfig(epochs=0, hidden=(8,))
    m = train(data, nuis, cfg, RngState(1, 0))
    init = init_mlp(1, (8,), rng=RngState(1, 0).child("init"))
    assert np.array_equal(m.velocity.flat(), init.flat())
    assert m.loss_log == []


def test_zero_init_untrained_flow_returns_base_atoms():
    _, data, nuis = _setup()
    m = train(data, nuis, TrainConfig(epochs=0, zero_init=True), RngState(2, 0))
    for a in (0, 1):
        out = sample_counterfactual(m, a, 300, RngState(3, a))
        atoms = data.y[data.a == a]
        dist = np.abs(out[:, 0][:, None] - atoms[:, 0][None, :]).min(axis=1)
        assert dist.max() < 1e-12


def test_external_base_source_is_resampled():
    _, data, nuis = _setup()
    m = train(data, nuis, TrainConfig(epochs=0, zero_init=True), RngState(2, 0))
    src = np.array([[1.0], [2.0], [3.5]])
    out = sample_counterfactual(m, 1, 100, RngState(4, 0), base_source=src)
    assert set(np.round(out[:, 0], 10)) <= {1.0, 2.0, 3.5}


def test_training_is_seed_deterministic():
    _, data, nuis = _setup()
    cfg = TrainConfig(epochs=3, batch=64, hidden=(8,))
    m1 = train(data, nuis, cfg, RngState(5, 0))
    m2 = train(data, nuis, cfg, RngState(5, 0))
    assert np.array_equal(m1.velocity.flat(), m2.velocity.flat())
    s1 = sample_counterfactual(m1, 1, 50, RngState(6, 0))
    s2 = sample_counterfactual(m2, 1, 50, RngState(6, 0))
    assert np.array_equal(s1, s2)


def test_loss_log_csv_has_one_row_per_epoch_and_arm(tmp_path):
    _, data, nuis = _setup()
    path = tmp_path / "log" / "loss.csv"
    m = train(data, nuis, TrainConfig(epochs=4, batch=64, hidden=(8,)), RngState(7, 0), loss_log_path=path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "arm", "loss", "wall_ms"]
    assert [(int(r[0]), int(r[1])) for r in rows[1:]] == [(e, a) for e in range(4) for a in (0, 1)]
    assert all(float(r[2]) >= 0 and float(r[3]) >= 0 for r in rows[1:])
    assert len(m.loss_log) == 8


def test_training_reduces_loss():
    _, data, nuis = _setup(n=400)
    m = train(data, nuis, TrainConfig(epochs=60, batch=100, lr=1e-2, hidden=(16,)), RngState(8, 0))
    first = np.mean([l for e, a, l, _ in m.loss_log if e == 0])
    last = np.mean([l for e, a, l, _ in m.loss_log if e >= 55])
    assert last < first


def test_non_finite_loss_raises_with_last_finite_parameters(monkeypatch):
    _, data, nuis = _setup()
    real = model_mod.dr_fm_step_indep
    calls = {"n": 0}

    def flaky(theta, *args, **kwargs):
        calls["n"] += 1
        loss, grad = real(theta, *args, **kwargs)
        if calls["n"] == 3:
            flaky.seen = theta
            return float("nan"), grad
        return loss, grad

    monkeypatch.setattr(model_mod, "dr_fm_step_indep", flaky)
    with pytest.raises(DivergenceError) as info:
        train(data, nuis, TrainConfig(epochs=5, batch=100, hidden=(8,)), RngState(9, 0))
    assert info.value.step == 1
    assert np.array_equal(info.value.last_params.flat(), flaky.seen.flat())
    assert np.all(np.isfinite(info.value.last_params.flat()))


def test_parameter_average_option_returns_averaged_iterate():
    _, data, nuis = _setup()
    base = TrainConfig(epochs=3, batch=64, hidden=(8,))
    last = train(data, nuis, base, RngState(10, 0))
    avg = train(data, nuis, TrainConfig(epochs=3, batch=64, hidden=(8,), ema=0.9), RngState(10, 0))
    assert not np.array_equal(last.velocity.flat(), avg.velocity.flat())


def test_tilted_training_fits_one_tilt_per_arm():
    _, data, nuis = _setup(n=150)
    cfg = TrainConfig(epochs=2, batch=50, hidden=(8,), coupling="eot", tilt=True, tilt_features=8,
                      tilt_reservoir=256, tilt_max_iters=200)
    m = train(data, nuis, cfg, RngState(11, 0))
    assert set(m.tilts) == {0, 1}
    for fmap, tw in m.tilts.values():
        assert tw.weights.shape == (256,) and abs(tw.weights.sum() - 1) < 1e-9


def test_sampling_validates_inputs():
    _, data, nuis = _setup()
    m = train(data, nuis, TrainConfig(epochs=0), RngState(12, 0))
    with pytest.raises(ValidationError):
        sample_counterfactual(m, 2, 5, RngState(0, 0))
    with pytest.raises(ValidationError):
        sample_counterfactual(m, 1, -1, RngState(0, 0))
    assert sample_counterfactual(m, 1, 0, RngState(0, 0)).shape == (0, 1)
    with pytest.raises(ValidationError):
        train(data, nuis, TrainConfig(epochs=0))


def test_non_finite_samples_raise():
    _, data, nuis = _setup()
    m = train(data, nuis, TrainConfig(epochs=0, zero_init=True), RngState(12, 0))
    bad = FlowModel(m.velocity, m.base_kind, m.ode_steps, m.loc, m.scale,
                    {0: m.base_atoms[0], 1: np.full_like(m.base_atoms[1], np.inf)})
    with pytest.raises(NumericalError), np.errstate(invalid="ignore"):
        sample_counterfactual(bad, 1, 4, RngState(0, 0))


def test_std_normal_base_draws_from_gaussian():
    _, data, nuis = _setup()
    m = train(data, nuis, TrainConfig(epochs=0, zero_init=True, base_kind="std_normal"), RngState(13, 0))
    out = sample_counterfactual(m, 0, 4000, RngState(14, 0))
    z = (out[:, 0] - m.loc[0][0]) / m.scale[0][0]
    assert abs(z.mean()) < 4 / np.sqrt(4000) and abs(z.std() - 1) < 0.05


@pytest.mark.slow
def test_unconfounded_eot_flow_is_near_identity():
    _, data, nuis = _setup("Mixture2D", n=1000, seed=20, params={"gamma": 0.0})
    m = train(data, nuis, TrainConfig(coupling="eot", epochs=150), RngState(21, 0))
    for a in (0, 1):
        atoms = data.y[data.a == a]
        out = m.push((atoms - m.loc[a]) / m.scale[a], a)
        disp = np.linalg.norm(out - atoms, axis=1).mean()
        assert disp <= 0.2 * float(np.min(out.std(axis=0)))


# -- checkpoints ------------------------------------------------------------------------

def test_flow_checkpoint_round_trip_is_bitwise(tmp_path):
    _, data, nuis = _setup()
    m = train(data, nuis, TrainConfig(epochs=2, batch=64, hidden=(8, 8)), RngState(15, 0))
    path = save_checkpoint(m, tmp_path / "m.npz")
    back = load_checkpoint(path)
    assert np.array_equal(back.velocity.flat(), m.velocity.flat())
    assert back.loss_log == m.loss_log
    for a in (0, 1):
        assert np.array_equal(sample_counterfactual(back, a, 64, RngState(16, a)),
                              sample_counterfactual(m, a, 64, RngState(16, a)))


def test_conditional_flow_checkpoint_round_trip_is_bitwise(tmp_path):
    _, data, _ = _setup(n=120)
    flow = fit_plugin_cfm(data, CfmConfig(hidden=(8,), epochs=2, batch=60), RngState(17, 0))
    back = load_checkpoint(save_checkpoint(flow, tmp_path / "c.npz"))
    x = np.array([0.4])
    assert np.array_equal(sample_conditional(back, x, 1, 32, RngState(18, 0)),
                          sample_conditional(flow, x, 1, 32, RngState(18, 0)))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_checkpoint(tmp_path / "missing.npz")
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(ValidationError):
        load_checkpoint(junk)
    with pytest.raises(ValidationError):
        save_checkpoint(object(), tmp_path / "x.npz")
    old = tmp_path / "old.npz"
    np.savez(old, meta=np.array('{"format": 0}'))
    with pytest.raises(ValidationError, match="format"):
        load_checkpoint(old)
