import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decflow.errors import NumericalError, ValidationError
from decflow.numkit import (MlpParams, RngState, adam_init, adam_step, assemble_inputs, backprop,
                            forward, init_mlp, integrate_ode, mlp_apply, per_row_grads, rng_stream,
                            silu)

from conftest import central_fd, random_params, rel_err


# -- RNG streams ---------------------------------------------------------------

def test_same_stream_replays():
    a = rng_stream(7, 3).uniform(1000)
    b = rng_stream(7, 3).uniform(1000)
    assert np.array_equal(a, b)


def test_distinct_streams_differ():
    a = rng_stream(7, 3).uniform(64)
    b = rng_stream(7, 4).uniform(64)
    assert np.any(a != b)


def test_uniform_mean_within_clt_bound():
    u = rng_stream(7, 3).uniform(10**6)
    # 4 sigma of the mean of 1e6 uniforms is 4 * sqrt(1/12) / 1000 ~ 0.00115
    assert abs(u.mean() - 0.5) < 0.002


def test_child_streams_independent_of_consumption_order():
    root = RngState(11, 0)
    first = root.child("a").normal(5)
    root.child("b").normal(100)
    assert np.array_equal(root.child("a").normal(5), first)


def test_categorical_and_permutation():
    r = RngState(3, 0)
    draws = r.categorical([0.0, 1.0, 0.0], 200)
    assert np.all(draws == 1)
    perm = r.permutation(50)
    assert sorted(perm.tolist()) == list(range(50))
    g = r.gamma(2.0, 20000)
    assert abs(g.mean() - 2.0) < 0.1


@given(st.integers(0, 2**63 - 1), st.integers(0, 2**63 - 1))
def test_rng_is_pure_function_of_key(seed, stream):
    assert np.array_equal(RngState(seed, stream).normal(8), RngState(seed, stream).normal(8))


# -- SiLU ----------------------------------------------------------------------

def test_silu_values():
    assert silu(0.0) == 0.0
    assert abs(silu(20.0) - 20.0) < 1e-7
    assert silu(-1.0) == pytest.approx(-1.0 / (1.0 + math.e), abs=1e-12)
    assert silu(-1.0) == pytest.approx(-0.2689414213699951, abs=1e-12)


# -- MLP -----------------------------------------------------------------------

def test_zero_params_give_zero_output():
    net = init_mlp(2, (16, 16), zero=True)
    out = mlp_apply(net, np.array([1.0, -2.0]), 0.3, 1)
    assert np.array_equal(out, np.zeros(2))


def test_linear_identity_layer_returns_y():
    p = 3
    w = np.zeros((p, p + 2))
    w[:, :p] = np.eye(p)
    net = MlpParams([w], [np.zeros(p)], p)
    y = np.array([0.5, -1.5, 2.0])
    assert np.array_equal(mlp_apply(net, y, 0.7, 1), y)


def test_forward_deterministic(small_net):
    y = np.linspace(-1, 1, 7)[:, None]
    assert np.array_equal(mlp_apply(small_net, y, 0.2, 0), mlp_apply(small_net, y, 0.2, 0))


def test_input_layout_concatenates_y_t_a_context():
    inp = assemble_inputs(np.array([[1.0, 2.0]]), 0.25, 1, np.array([9.0]))
    assert inp.tolist() == [[1.0, 2.0, 0.25, 1.0, 9.0]]


def test_dimension_mismatch_raises(small_net):
    with pytest.raises(ValidationError):
        mlp_apply(small_net, np.zeros(3), 0.1, 0)
    with pytest.raises(ValidationError):
        MlpParams([np.zeros((4, 3)), np.zeros((1, 5))], [np.zeros(4), np.zeros(1)], 1)


# -- backprop ------------------------------------------------------------------

def test_zero_cotangent_zero_gradient(small_net):
    inp = assemble_inputs(np.ones((4, 1)), 0.5, 1)
    g = backprop(small_net, inp, np.zeros((4, 1)))
    assert np.all(g.flat() == 0.0)


def test_single_hidden_unit_hand_derivation():
    # v = w2 * silu(w1 . u + b1) + b2 with u = (y, t, a)
    w1 = np.array([[0.7, -0.3, 0.2]])
    b1 = np.array([0.1])
    w2 = np.array([[1.3]])
    b2 = np.array([-0.4])
    net = MlpParams([w1, w2], [b1, b2], 1)
    u = np.array([[0.9, 0.25, 1.0]])
    z = float(w1[0] @ u[0] + b1[0])
    sig = 1.0 / (1.0 + math.exp(-z))
    h = z * sig
    dh = sig * (1.0 + z * (1.0 - sig))
    c = 2.0
    g = backprop(net, u, np.array([[c]]))
    assert g.weights[1][0, 0] == pytest.approx(c * h, abs=1e-12)
    assert g.biases[1][0] == pytest.approx(c, abs=1e-12)
    assert np.allclose(g.weights[0][0], c * w2[0, 0] * dh * u[0], atol=1e-12, rtol=0)
    assert g.biases[0][0] == pytest.approx(c * w2[0, 0] * dh, abs=1e-12)


def _fd_backprop_error(net, n=6, seed=0):
    r = RngState(seed, 9)
    inp = np.concatenate([r.normal((n, net.y_dim)), r.uniform((n, 1)),
                          r.integers(0, 2, (n, 1)).astype(float),
                          r.normal((n, net.ctx_dim))], axis=1)
    cot = r.normal((n, net.y_dim))
    g = backprop(net, inp, cot).flat()
    fd = central_fd(lambda v: float(np.sum(cot * forward(net.unflat(v), inp)[0])), net.flat())
    return rel_err(g, fd)


@pytest.mark.parametrize("seed", range(50))
def test_backprop_matches_finite_differences(seed):
    r = RngState(seed, 2)
    p = int(r.integers(1, 4))
    depth = int(r.integers(1, 3))
    hidden = tuple(int(h) for h in r.integers(2, 9, depth))
    ctx = int(r.integers(0, 3))
    net = random_params(p, hidden, seed, ctx)
    assert _fd_backprop_error(net, seed=seed) < 1e-5


def test_backprop_shape_mismatch(small_net):
    inp = assemble_inputs(np.ones((4, 1)), 0.5, 1)
    with pytest.raises(ValidationError):
        backprop(small_net, inp, np.zeros((3, 1)))


def test_per_row_grads_sum_to_backprop():
    net = random_params(2, (5, 4), 3)
    r = RngState(4, 0)
    inp = assemble_inputs(r.normal((7, 2)), r.uniform(7), r.integers(0, 2, 7))
    cot = r.normal((7, 2))
    rows = per_row_grads(net, inp, cot)
    assert rows.shape == (7, net.size)
    assert np.allclose(rows.sum(axis=0), backprop(net, inp, cot).flat(), atol=1e-12)


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_grad_leaves_params(small_net):
    st0 = adam_init(small_net)
    _, new = adam_step(st0, small_net, small_net.map(np.zeros_like))
    assert np.max(np.abs(new.flat() - small_net.flat())) < 1e-9 * st0.lr


def test_adam_constant_grad_first_step_moves_by_lr(small_net):
    st0 = adam_init(small_net, lr=1e-3)
    g = small_net.map(lambda a: np.where(np.arange(a.size).reshape(a.shape) % 2 == 0, 0.5, -2.0))
    st1, new = adam_step(st0, small_net, g)
    step = new.flat() - small_net.flat()
    expected = -1e-3 * g.flat() / (np.abs(g.flat()) + 1e-8)
    assert np.allclose(step, expected, atol=1e-6)
    assert st1.step_count == 1


def test_adam_deterministic_and_counts(small_net):
    def run():
        st, p = adam_init(small_net), small_net
        for k in range(5):
            st, p = adam_step(st, p, p.map(lambda a: np.sin(a + k)))
        return st, p
    (s1, p1), (s2, p2) = run(), run()
    assert np.array_equal(p1.flat(), p2.flat())
    assert s1.step_count == 5


def test_adam_rejects_non_finite(small_net):
    bad = small_net.map(lambda a: np.full_like(a, np.nan))
    with pytest.raises(NumericalError):
        adam_step(adam_init(small_net), small_net, bad)


# -- ODE integration -----------------------------------------------------------

@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_constant_field_exact(method):
    c = np.array([0.3, -1.25])
    y0 = np.array([1.0, 2.0])
    y1 = integrate_ode(lambda y, t: c, y0, 7, method)
    assert np.allclose(y1, y0 + c, atol=1e-14, rtol=0)


def test_rk4_exponential():
    assert abs(integrate_ode(lambda y, t: y, np.array([1.0]), 100, "rk4")[0] - math.e) < 1e-8


def test_euler_exponential_recursion():
    assert integrate_ode(lambda y, t: y, np.array([1.0]), 100, "euler")[0] == pytest.approx(1.01**100, rel=1e-13)


@pytest.mark.parametrize("steps", [4, 8, 16, 32])
def test_rk4_fourth_order(steps):
    e1 = abs(integrate_ode(lambda y, t: y, np.array([1.0]), steps, "rk4")[0] - math.e)
    e2 = abs(integrate_ode(lambda y, t: y, np.array([1.0]), 2 * steps, "rk4")[0] - math.e)
    assert 14 <= e1 / e2 <= 18


def test_ode_errors():
    with pytest.raises(ValidationError):
        integrate_ode(lambda y, t: y, np.ones(1), 0)
    with pytest.raises(NumericalError), np.errstate(over="ignore"):
        integrate_ode(lambda y, t: y * 1e200, np.ones(1), 10, "euler")
