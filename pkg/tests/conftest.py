import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from decflow.numkit import MlpParams, RngState, init_mlp

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_fd(fn, vec, h=1e-5):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    g = np.empty_like(vec)
    for k in range(vec.size):
        e = np.zeros_like(vec)
        e[k] = h
        g[k] = (fn(vec + e) - fn(vec - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return RngState(12345, 0)


@pytest.fixture
def small_net(rng):
    return init_mlp(1, (8,), rng=rng.child("net"))


def random_params(p, hidden, seed, ctx_dim=0, scale=1.0) -> MlpParams:
    r = RngState(seed, 1)
    dims = [p + 2 + ctx_dim, *hidden, p]
    ws = [scale * r.normal((o, i)) / np.sqrt(i) for i, o in zip(dims[:-1], dims[1:])]
    bs = [0.1 * r.normal(o) for o in dims[1:]]
    return MlpParams(ws, bs, p, ctx_dim)


ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed: bool, detail: str):
    """Register the one-line verdict printed for an acceptance criterion."""
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
