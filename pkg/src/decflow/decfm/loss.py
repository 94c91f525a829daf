"""Flow-matching losses and the doubly robust minibatch gradient estimators."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ValidationError
from ..numkit import MlpParams, RngState, backprop, forward
from .coupling import resample_indices, resolve_eps, sinkhorn_duals, sq_cost
from .problem import TrainConfig, TrainingProblem
from .tilt import tilt_source_weights


def pair_inputs(y1, y0, t, a) -> tuple:
    """Network inputs on the linear path and the regression target ``y1 - y0``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    yt = (1.0 - t) * y0 + t * y1
    aa = np.broadcast_to(np.asarray(a, dtype=np.float64).reshape(-1, 1), t.shape)
    return np.concatenate([yt, t, aa], axis=1), y1 - y0


def weighted_pair_loss(theta: MlpParams, y1, y0, t, a, coef):
    """``sum_i coef_i |v(y_t^i, t_i, a_i) - (y1_i - y0_i)|^2`` and its exact gradient."""
    loss, grad, _ = _weighted_pair_terms(theta, y1, y0, t, a, coef)
    return loss, grad


def _weighted_pair_terms(theta, y1, y0, t, a, coef):
    y1 = np.atleast_2d(np.asarray(y1, dtype=np.float64))
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    if y1.shape != y0.shape or y1.shape[1] != theta.y_dim:
        raise ValidationError(f"pair shapes {y1.shape} / {y0.shape} do not match y_dim={theta.y_dim}")
    coef = np.asarray(coef, dtype=np.float64).reshape(-1)
    inp, target = pair_inputs(y1, y0, t, a)
    out, cache = forward(theta, inp)
    resid = out - target
    per_row = np.einsum("ij,ij->i", resid, resid)
    loss = float(coef @ per_row)
    grad = backprop(theta, inp, (2.0 * coef)[:, None] * resid, cache)
    return loss, grad, coef * per_row


def pairwise_fm_loss(theta: MlpParams, y1, y0, t: float, a: int):
    """Single-pair flow-matching loss ``|v((1-t) y0 + t y1, t, a) - (y1 - y0)|^2`` and gradient."""
    y1 = np.asarray(y1, dtype=np.float64).reshape(1, -1)
    y0 = np.asarray(y0, dtype=np.float64).reshape(1, -1)
    return weighted_pair_loss(theta, y1, y0, np.array([t]), np.array([a]), np.ones(1))


class _Pairs:
    """Accumulates weighted pairs so one forward/backward pass covers the whole step."""

    def __init__(self):
        self.parts = []

    def add(self, y1, y0, t, a, coef, tag):
        keep = coef != 0.0  # zero-weight terms are dropped, not multiplied by zero
        if np.any(keep):
            self.parts.append((y1[keep], y0[keep], t[keep], np.full(int(keep.sum()), a), coef[keep], tag))

    def evaluate(self, theta: MlpParams, stats: Optional[dict]):
        if not self.parts:
            return 0.0, theta.map(np.zeros_like)
        cat = [np.concatenate([p[k] for p in self.parts]) for k in range(5)]
        loss, grad, per = _weighted_pair_terms(theta, *cat)
        if stats is not None:
            k = 0
            for part in self.parts:
                m = part[4].shape[0]
                stats[part[5]] = stats.get(part[5], 0.0) + float(per[k:k + m].sum())
                k += m
        return loss, grad


def _arm_weights(problem: TrainingProblem, idx, arm):
    observed = problem.a[idx] == arm
    w = np.zeros(observed.shape[0])
    np.divide(1.0, problem.pi(arm, idx), out=w, where=observed)
    return observed, w


def dr_fm_step_indep(theta: MlpParams, batch, problem: TrainingProblem, cfg: TrainConfig,
                     rng: RngState, stats: Optional[dict] = None, trace: Optional[dict] = None):
    """Doubly robust flow-matching loss and gradient on one minibatch (independent coupling).

    For every batch row ``b`` and arm ``a`` the row contributes
    ``w_b l(Y_b, Yt; tau_b) + (1 - w_b) mean_m l(Yhat_m, Yt; tau_b)`` with
    ``w_b = 1{A_b = a} / pi_a(X_b)``, averaged over the ``M0`` base draws
    ``Yt`` and normalized by the batch size. Arms with no observed row in the
    batch are skipped. ``stats`` (if given) receives per-arm losses and
    ``trace`` the random draws.
    """
    idx = np.asarray(batch)
    B = idx.size
    M, M0, p = cfg.M, cfg.M0, problem.p
    tau = rng.uniform(B)
    pairs = _Pairs()
    for arm in (0, 1):
        observed, w = _arm_weights(problem, idx, arm)
        if not observed.any():
            continue
        base = problem.base_draws(arm, B * M0, rng).reshape(B, M0, p)
        hat = problem.plugin_draws(arm, idx, M, rng)
        if trace is not None:
            trace[arm] = {"tau": tau, "base": base, "hat": hat, "w": w}
        # observed term: (B, M0) pairs
        y1 = np.repeat(problem.z_obs[idx], M0, axis=0)
        coef = np.repeat(w / (B * M0), M0)
        pairs.add(y1, base.reshape(-1, p), np.repeat(tau, M0), arm, coef, arm)
        # plug-in term: (B, M, M0) pairs
        y1 = np.repeat(hat, M0, axis=1).reshape(-1, p)
        y0 = np.repeat(base[:, None], M, axis=1).reshape(-1, p)
        coef = np.repeat((1.0 - w) / (B * M * M0), M * M0)
        pairs.add(y1, y0, np.repeat(tau, M * M0), arm, coef, arm)
    return pairs.evaluate(theta, stats)


def _subsample_columns(B, M, K, rng):
    """K distinct column indices per row (without replacement)."""
    if K == M:
        return np.broadcast_to(np.arange(M), (B, M))
    return np.argsort(rng.uniform((B, M)), axis=1)[:, :K]


def dr_fm_step_eot(theta: MlpParams, batch, problem: TrainingProblem, cfg: TrainConfig,
                   rng: RngState, stats: Optional[dict] = None, trace: Optional[dict] = None):
    """Doubly robust loss and gradient with minibatch entropic-OT base partners.

    Per arm: the source set holds ``K`` plug-in draws per batch row (tilt
    weighted if a tilt was fitted), the target set ``B_a`` base draws. Each
    observed ``Y_b`` and each plug-in draw gets a base partner from the
    entropic conditional of the Sinkhorn plan.
    """
    idx = np.asarray(batch)
    B = idx.size
    M, K, p = cfg.M, cfg.K, problem.p
    tau = rng.uniform(B)
    pairs = _Pairs()
    for arm in (0, 1):
        observed, w = _arm_weights(problem, idx, arm)
        Ba = int(observed.sum())
        if Ba == 0:
            continue
        hat = problem.plugin_draws(arm, idx, M, rng)
        cols = _subsample_columns(B, M, K, rng)
        src = hat[np.arange(B)[:, None], cols].reshape(-1, p)
        tgt = problem.base_draws(arm, Ba, rng)
        weights = None
        if arm in problem.tilts:
            fmap, tw = problem.tilts[arm]
            weights = tilt_source_weights(src, fmap, tw.lam)
        C = sq_cost(src, tgt)
        eps = resolve_eps(cfg.sinkhorn_eps, cfg.eps_mode_for(p), C)
        plan = sinkhorn_duals(src, tgt, eps, cfg.sinkhorn_iters, weights=weights, cost=C,
                             polish=cfg.sinkhorn_polish)
        obs_rows = np.flatnonzero(observed)
        j_obs = resample_indices(problem.z_obs[idx[obs_rows]], plan, rng)
        j_hat = resample_indices(hat.reshape(-1, p), plan, rng)
        if trace is not None:
            trace[arm] = {"tau": tau, "hat": hat, "target": tgt, "plan": plan,
                          "j_obs": j_obs, "j_hat": j_hat, "w": w}
        pairs.add(problem.z_obs[idx[obs_rows]], tgt[j_obs], tau[obs_rows], arm, w[obs_rows] / B, arm)
        pairs.add(hat.reshape(-1, p), tgt[j_hat], np.repeat(tau, M), arm,
                  np.repeat((1.0 - w) / (B * M), M), arm)
    return pairs.evaluate(theta, stats)
