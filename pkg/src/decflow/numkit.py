"""Deterministic numerical kernels.

Seeded counter-based random streams, a small SiLU multilayer perceptron with an
exact hand-written backward pass, Adam, and fixed-step ODE integration. All
arithmetic is float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ValidationError

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _derive_stream_id(stream_id: int, keys: Sequence) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(stream_id) & _MASK64).encode())
    for k in keys:
        h.update(b"/")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little")


class RngState:
    """A Philox stream keyed by ``(seed, stream_id)``.

    Philox is counter based, so two streams with different keys never share
    state and a given key always replays the same sequence regardless of how
    many other streams exist or in what order they are consumed.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def __repr__(self):
        return f"RngState(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    @property
    def counter(self) -> int:
        c = self._gen.bit_generator.state["state"]["counter"]
        return int(sum(int(v) << (64 * i) for i, v in enumerate(c)))

    def child(self, *keys) -> "RngState":
        """Independent substream named by ``keys`` (e.g. ``child("trial", 3)``)."""
        return RngState(self.seed, _derive_stream_id(self.stream_id, keys))

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def gamma(self, shape, size=None, scale=1.0):
        return self._gen.gamma(shape, scale, size)

    def categorical(self, weights, size=None):
        w = np.asarray(weights, dtype=np.float64)
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        u = self._gen.random(size)
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(w) - 1)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int):
        return self._gen.permutation(n)


def rng_stream(seed: int, stream_id: int = 0) -> RngState:
    return RngState(seed, stream_id)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


@dataclass
class MlpParams:
    """Dense SiLU network ``v(y, t, a[, x])``.

    The input row is the concatenation ``[y (p), t (1), a (1), context (d)]``;
    the output has dimension ``p``. ``weights[i]`` has shape ``(out_i, in_i)``.
    """

    weights: list
    biases: list
    y_dim: int
    ctx_dim: int = 0
    activation: str = "silu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("weights and biases must be non-empty lists of equal length")
        if self.weights[0].shape[1] != self.in_dim:
            raise ValidationError(
                f"first layer expects {self.weights[0].shape[1]} inputs, layout gives {self.in_dim}"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValidationError(f"bias {i} shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValidationError(f"layer {i} input {w.shape[1]} != previous output")
        if self.weights[-1].shape[0] != self.y_dim:
            raise ValidationError("output layer must have y_dim units")

    @property
    def in_dim(self) -> int:
        return self.y_dim + 2 + self.ctx_dim

    @property
    def hidden(self) -> tuple:
        return tuple(w.shape[0] for w in self.weights[:-1])

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([x.ravel() for x in self.arrays()])

    def unflat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValidationError(f"expected flat vector of size {self.size}, got {vec.shape}")
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[k : k + w.size].reshape(w.shape))
            k += w.size
            bs.append(vec[k : k + b.size].copy())
            k += b.size
        return MlpParams([w.copy() for w in ws], bs, self.y_dim, self.ctx_dim, self.activation)

    def map(self, fn) -> "MlpParams":
        return MlpParams(
            [fn(w) for w in self.weights], [fn(b) for b in self.biases],
            self.y_dim, self.ctx_dim, self.activation,
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(x)) for x in self.arrays())


def init_mlp(y_dim: int, hidden: Sequence[int] = (64,), ctx_dim: int = 0,
             rng: Optional[RngState] = None, zero: bool = False) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, or all zeros."""
    dims = [y_dim + 2 + ctx_dim, *hidden, y_dim]
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        if zero:
            ws.append(np.zeros((fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        else:
            if rng is None:
                raise ValidationError("rng required for random init")
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform((fan_out, fan_in), -bound, bound))
            bs.append(rng.uniform(fan_out, -bound, bound))
    return MlpParams(ws, bs, y_dim, ctx_dim)


def assemble_inputs(y, t, a, context=None) -> np.ndarray:
    """Stack ``[y, t, a, context]`` into an ``(N, in_dim)`` matrix.

    ``y`` is ``(N, p)`` (a 1-D ``y`` is one row); ``t`` and ``a`` may be
    scalars or length-N vectors.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    n = y.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
    aa = np.broadcast_to(np.asarray(a, dtype=np.float64).reshape(-1, 1), (n, 1))
    cols = [y, tt, aa]
    if context is not None:
        c = np.asarray(context, dtype=np.float64)
        if c.ndim == 1:
            c = c[None, :]
        cols.append(np.broadcast_to(c, (n, c.shape[1])))
    return np.concatenate(cols, axis=1)


def forward(params: MlpParams, inputs: np.ndarray):
    """Batched forward pass. Returns ``(outputs, cache)`` for :func:`backprop`."""
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ValidationError(f"inputs must be (N, {params.in_dim}), got {h.shape}")
    acts, pre = [h], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T
        z += b
        if i < last:
            pre.append(z)
            h = z * expit(z)
            acts.append(h)
        else:
            h = z
    return h, (acts, pre)


def mlp_apply(params: MlpParams, y, t, a, context=None) -> np.ndarray:
    """Evaluate the velocity at one point (vector ``y``) or a batch (matrix ``y``)."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    yb = y[None, :] if single else y
    if yb.shape[1] != params.y_dim:
        raise ValidationError(f"y has dim {yb.shape[1]}, params expect {params.y_dim}")
    if params.ctx_dim and context is None:
        raise ValidationError("params expect a context vector")
    if context is not None and np.shape(context)[-1] != params.ctx_dim:
        raise ValidationError(f"context dim {np.shape(context)[-1]} != {params.ctx_dim}")
    out, _ = forward(params, assemble_inputs(yb, t, a, context))
    return out[0] if single else out


def backprop(params: MlpParams, inputs: np.ndarray, cotangents: np.ndarray, cache=None) -> MlpParams:
    """Gradient of ``sum(cotangents * forward(inputs))`` with respect to the parameters."""
    if cache is None:
        out, cache = forward(params, inputs)
    else:
        out = None
    g = np.asarray(cotangents, dtype=np.float64)
    n_out = params.y_dim
    if g.ndim != 2 or g.shape != (np.shape(inputs)[0], n_out):
        raise ValidationError(f"cotangents must be ({np.shape(inputs)[0]}, {n_out}), got {g.shape}")
    acts, pre = cache
    L = len(params.weights)
    gw = [None] * L
    gb = [None] * L
    for i in range(L - 1, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i]
            z = pre[i - 1]
            s = expit(z)
            g *= s * (1.0 + z * (1.0 - s))
    return MlpParams(gw, gb, params.y_dim, params.ctx_dim, params.activation)


def per_row_grads(params: MlpParams, inputs: np.ndarray, cotangents: np.ndarray) -> np.ndarray:
    """Row-wise parameter gradients, ``(N, params.size)`` in :meth:`MlpParams.flat` order."""
    _, (acts, pre) = forward(params, inputs)
    g = np.asarray(cotangents, dtype=np.float64)
    n = g.shape[0]
    L = len(params.weights)
    gw, gb = [None] * L, [None] * L
    for i in range(L - 1, -1, -1):
        gw[i] = (g[:, :, None] * acts[i][:, None, :]).reshape(n, -1)
        gb[i] = g
        if i > 0:
            g = g @ params.weights[i]
            z = pre[i - 1]
            s = expit(z)
            g = g * (s * (1.0 + z * (1.0 - s)))
    return np.concatenate([m for pair in zip(gw, gb) for m in pair], axis=1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    first_moment: MlpParams
    second_moment: MlpParams
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8


def adam_init(params: MlpParams, lr=1e-3, beta1=0.9, beta2=0.999, eps_stab=1e-8) -> AdamState:
    z = params.map(np.zeros_like)
    return AdamState(z, params.map(np.zeros_like), 0, lr, beta1, beta2, eps_stab)


def adam_step(state: AdamState, params: MlpParams, grad: MlpParams):
    """One bias-corrected Adam update. Returns ``(new_state, new_params)``."""
    if not grad.all_finite():
        raise NumericalError("non-finite gradient passed to adam_step")
    if grad.size != params.size:
        raise ValidationError("gradient and parameters differ in shape")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    ms, vs, ws, bs = [], [], [], []
    for p, m, v, g in zip(params.arrays(), state.first_moment.arrays(),
                          state.second_moment.arrays(), grad.arrays()):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        upd = state.lr * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps_stab)
        ms.append(m_new)
        vs.append(v_new)
        (ws if p.ndim == 2 else bs).append(p - upd)

    def _pack(arrs):
        return MlpParams(arrs[0::2], arrs[1::2], params.y_dim, params.ctx_dim, params.activation)

    new_state = AdamState(_pack(ms), _pack(vs), t, state.lr, b1, b2, state.eps_stab)
    return new_state, MlpParams(ws, bs, params.y_dim, params.ctx_dim, params.activation)


# ---------------------------------------------------------------------------
# ODE integration
# ---------------------------------------------------------------------------


def integrate_ode(velocity: Callable, y0, steps: int = 50, method: str = "rk4"):
    """Integrate ``dy/dt = velocity(y, t)`` from t=0 to t=1 with a fixed step."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    method = method.lower()
    if method not in ("euler", "rk4"):
        raise ValidationError(f"unknown ODE method {method!r}")
    y = np.array(y0, dtype=np.float64, copy=True)
    h = 1.0 / steps
    for k in range(steps):
        t = k * h
        if method == "euler":
            y = y + h * velocity(y, t)
        else:
            k1 = velocity(y, t)
            k2 = velocity(y + 0.5 * h * k1, t + 0.5 * h)
            k3 = velocity(y + 0.5 * h * k2, t + 0.5 * h)
            k4 = velocity(y + h * k3, t + h)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite state at step {k + 1}/{steps}")
    return y
