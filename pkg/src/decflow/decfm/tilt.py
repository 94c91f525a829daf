"""Doubly robust moment targets and exponential tilting of plug-in reservoirs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from ..designs import ObservationalDataset
from ..errors import ValidationError
from ..nuisance import NuisanceBundle
from ..numkit import RngState


@dataclass(frozen=True)
class FeatureMap:
    """Random cosine features ``s(y) = cos(W y + b)``."""

    W: np.ndarray  # (m_feat, p)
    b: np.ndarray  # (m_feat,)

    def __call__(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        return np.cos(y @ self.W.T + self.b)


def random_cosine_features(p: int, m_feat: int, rng: RngState) -> FeatureMap:
    return FeatureMap(rng.normal((m_feat, p)), rng.uniform(m_feat, 0.0, 2 * np.pi))


def aipw_moments(s_obs, s_hat, observed, pi_a) -> np.ndarray:
    """``mean[s_hat + 1{A=a}/pi_a * (s_obs - s_hat)]`` with rows of ``s_obs`` ignored where unobserved."""
    s_hat = np.atleast_2d(s_hat)
    w = np.asarray(observed, dtype=np.float64) / np.asarray(pi_a, dtype=np.float64)
    corr = np.zeros_like(s_hat)
    obs = np.asarray(observed, dtype=bool)
    corr[obs] = w[obs, None] * (np.atleast_2d(s_obs)[obs] - s_hat[obs])
    return np.mean(s_hat + corr, axis=0)


def dr_moment_estimate(data: ObservationalDataset, nuisances: NuisanceBundle, features, a: int,
                       rng: RngState) -> np.ndarray:
    """AIPW estimate of E[s(Y(a))] using one plug-in draw per unit."""
    if a not in (0, 1):
        raise ValidationError("arm must be 0 or 1")
    rows = np.arange(data.n)
    y_hat = nuisances.plugin_draws(a, rows, 1, rng)[:, 0]
    s_hat = np.asarray(features(y_hat), dtype=np.float64).reshape(data.n, -1)
    s_obs = np.asarray(features(data.y), dtype=np.float64).reshape(data.n, -1)
    return aipw_moments(s_obs, s_hat, data.a == a, nuisances.pi(a))


@dataclass
class TiltWeights:
    lam: np.ndarray
    reservoir: np.ndarray
    weights: np.ndarray
    converged: bool = True
    objective: float = float("nan")

    def __post_init__(self):
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValidationError("tilt weights must be a probability vector")


def _tilt_objective(lam, G, target, reg):
    w = softmax(G @ lam)
    mu = G.T @ w
    r = mu - target
    val = float(r @ r + reg * lam @ lam)
    # d mu / d lam = Cov_w(G)
    Gc = G - mu
    grad = 2.0 * (Gc.T @ (w * (Gc @ r))) + 2.0 * reg * lam
    return val, grad, w


def fit_tilt(reservoir, features, target_moments, lambda_reg: float = 1e-3,
             max_iters: int = 2000, tol: float = 1e-12) -> TiltWeights:
    """Minimize ``|sum_j w_j(lam) s(y_j) - target|^2 + reg |lam|^2`` over softmax weights.

    Gradient descent with Armijo backtracking; the trial step grows after each
    accepted move. Returns the best iterate and ``converged=False`` if the
    gradient tolerance is not met within ``max_iters``.
    """
    R = np.atleast_2d(np.asarray(reservoir, dtype=np.float64))
    if R.shape[0] == 0:
        raise ValidationError("empty reservoir")
    G = np.asarray(features(R), dtype=np.float64).reshape(R.shape[0], -1)
    target = np.asarray(target_moments, dtype=np.float64).reshape(-1)
    if target.shape[0] != G.shape[1]:
        raise ValidationError("target moment dimension does not match features")
    lam = np.zeros(G.shape[1])
    val, grad, w = _tilt_objective(lam, G, target, lambda_reg)
    step = 1.0
    converged = False
    for _ in range(max_iters):
        gn = float(grad @ grad)
        if gn < tol:
            converged = True
            break
        while step > 1e-16:
            cand = lam - step * grad
            cval, cgrad, cw = _tilt_objective(cand, G, target, lambda_reg)
            if cval <= val - 0.5 * step * gn:
                break
            step *= 0.5
        else:
            break
        lam, val, grad, w = cand, cval, cgrad, cw
        step *= 2.0
    if not converged:
        converged = float(grad @ grad) < tol
    return TiltWeights(lam, R, w, converged, val)


def tilt_source_weights(points, feature_map, lam) -> np.ndarray:
    """Softmax tilt weights for an arbitrary point set."""
    scores = feature_map(points) @ lam
    return np.exp(scores - logsumexp(scores))
