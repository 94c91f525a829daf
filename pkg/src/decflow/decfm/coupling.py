"""Minibatch entropic OT: weighted Sinkhorn target duals and conditional resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from ..errors import NumericalError, ValidationError
from ..numkit import RngState


@dataclass
class CouplingPlan:
    """Target potentials defining gamma(j | y) proportional to exp(v_j - |y - T_j|^2 / eps).

    ``duals`` already include the log target weights.
    """

    duals: np.ndarray
    target_points: np.ndarray
    eps: float
    marginal_violation: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        self.target_points = np.atleast_2d(np.asarray(self.target_points, dtype=np.float64))
        self.duals = np.asarray(self.duals, dtype=np.float64).reshape(-1)
        if self.duals.shape[0] != self.target_points.shape[0]:
            raise ValidationError("one dual per target point required")
        if not np.all(np.isfinite(self.duals)):
            raise NumericalError("non-finite dual potentials")
        if not self.eps > 0:
            raise ValidationError("eps must be positive")


def sq_cost(src, tgt) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    src = src[:, None] if src.ndim == 1 else src
    tgt = tgt[:, None] if tgt.ndim == 1 else tgt
    if src.shape[1] == 1:
        return (src - tgt.T) ** 2
    return cdist(src, tgt, "sqeuclidean")


def sinkhorn_plan(C, a, b, eps, iters=50, tol=1e-6, check_every=10, absorb_at=1e50, polish=False):
    """Log-stabilized Sinkhorn on cost ``C`` with marginals ``a`` (rows) and ``b`` (cols).

    Scalings are iterated in the primal domain against a kernel whose exponents
    are shifted by log-potentials ``f``, ``g``; whenever a scaling leaves
    ``[1/absorb_at, absorb_at]`` it is absorbed into the potentials and the
    kernel is rebuilt, so nothing underflows for small ``eps``.

    With ``polish`` set and the tolerance not yet met after ``iters``
    iterations, Newton steps on the column potentials finish the solve.

    Returns ``(f, g, P, violation, n_iter)`` with
    ``P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)``.
    """
    C = np.asarray(C, dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise NumericalError("non-finite cost entries")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a < 0) or np.any(b < 0):
        raise ValidationError("marginal weights must be nonnegative")
    if abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9:
        raise ValidationError("marginal weights must sum to 1")
    if not eps > 0:
        raise ValidationError("eps must be positive")
    # all kernel exponents <= 0 with a zero in every row and column
    f = C.min(axis=1)
    g = (C - f[:, None]).min(axis=0)

    def kernel():
        return np.exp((f[:, None] + g[None, :] - C) / eps)

    Kt = kernel()
    u = np.ones_like(a)
    v = np.ones_like(b)
    viol = np.inf
    it = 0
    while it < iters:
        it += 1
        Kv = Kt @ (b * v)
        u = 1.0 / Kv
        Ku = Kt.T @ (a * u)
        v = 1.0 / Ku
        if (u.max() > absorb_at or v.max() > absorb_at or u.min() < 1 / absorb_at
                or v.min() < 1 / absorb_at):
            f = f + eps * np.log(u)
            g = g + eps * np.log(v)
            u[:] = 1.0
            v[:] = 1.0
            Kt = kernel()
        if it % check_every == 0 or it == iters:
            row = a * u * (Kt @ (b * v))
            viol = float(np.abs(row - a).sum())  # columns are exact after the v update
            if viol < tol:
                break
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise NumericalError("Sinkhorn scalings became non-finite")
    f = f + eps * np.log(u)
    g = g + eps * np.log(v)
    if polish and viol >= tol:
        f, g = _newton_polish(C, a, b, eps, g, tol)
    P = (a[:, None] * b[None, :]) * np.exp((f[:, None] + g[None, :] - C) / eps)
    viol = float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())
    return f, g, P, viol, it


def _line_max(slope, max_doublings=80, bisections=60):
    """Step length maximizing a concave function along a ray, from its slope.

    The slope is positive at 0; the bracket grows or shrinks geometrically
    until it straddles a sign change, then bisects in log space.
    """
    if not slope(1.0) > 0:
        lo, hi = 0.5, 1.0
        while not slope(lo) > 0:
            lo, hi = lo / 2, lo
            if lo < 1e-300:
                return 0.0
    else:
        lo, hi = 1.0, 2.0
        for _ in range(max_doublings):
            if not slope(hi) > 0:
                break
            lo, hi = hi, hi * 2
        else:
            return lo
    for _ in range(bisections):
        mid = np.sqrt(lo * hi)
        if slope(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return lo


def _newton_polish(C, a, b, eps, g, tol, max_steps=2000):
    """Maximize the semi-dual over ``g`` by safeguarded Newton steps.

    For fixed ``g`` the row potentials ``f`` are chosen so that row marginals
    are exact; the gradient in ``g`` is then ``b - colsum(P)``.
    """
    rows = a > 0
    Cr, ar = C[rows], a[rows]
    lb = np.log(np.where(b > 0, b, 1.0))
    lb[b == 0] = -np.inf

    def solve_f(g):
        return -eps * logsumexp(lb[None, :] + (g[None, :] - Cr) / eps, axis=1)

    def objective(f, g):
        return float(ar @ f + b @ g)

    def plan(f, g):
        return ar[:, None] * np.exp(lb[None, :] + (f[:, None] + g[None, :] - Cr) / eps)

    def slope(g, d):
        return float((b - plan(solve_f(g), g).sum(axis=0)) @ d)

    f = solve_f(g)
    obj = objective(f, g)
    live = b > 0
    for _ in range(max_steps):
        P = plan(f, g)
        col = P.sum(axis=0)
        grad = b - col
        if np.abs(grad).sum() < 0.5 * tol:
            break
        # a Sinkhorn column update always ascends; Newton wins near the optimum
        g_sk = g.copy()
        g_sk[live] += eps * (np.log(b[live]) - np.log(np.maximum(col[live], 1e-300)))
        f_sk = solve_f(g_sk)
        best = (objective(f_sk, g_sk), f_sk, g_sk)
        H = np.diag(col) - (P / ar[:, None]).T @ P
        # H has the constant vector in its kernel; pin it with a rank-one term
        H += np.outer(b, b) + 1e-14 * np.eye(len(b))
        try:
            step = eps * np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = None
        if step is not None and np.all(np.isfinite(step)):
            g_new = g + step
            f_new = solve_f(g_new)
            obj_new = objective(f_new, g_new)
            if not (np.isfinite(obj_new) and obj_new >= obj + 0.25 * float(grad @ step)):
                g_new = g + _line_max(lambda t: slope(g + t * step, step)) * step
                f_new = solve_f(g_new)
                obj_new = objective(f_new, g_new)
            if np.isfinite(obj_new) and obj_new > best[0]:
                best = (obj_new, f_new, g_new)
        if not best[0] > obj:
            break
        obj, f, g = best
    f_full = np.zeros(a.shape[0])
    f_full[rows] = f
    return f_full, g


def sinkhorn_duals(source, target, eps: float, iters: int = 50, weights=None,
                   tol: float = 1e-6, cost=None, polish: bool = True) -> CouplingPlan:
    """Target dual potentials of the entropic coupling between weighted ``source`` and uniform ``target``.

    ``iters`` Sinkhorn sweeps are followed, when ``polish`` is set and the
    marginals are still off by ``tol`` or more, by Newton refinement.
    """
    source = np.atleast_2d(np.asarray(source, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise ValidationError("empty point set")
    ns, nt = source.shape[0], target.shape[0]
    a = np.full(ns, 1.0 / ns) if weights is None else np.asarray(weights, dtype=np.float64)
    b = np.full(nt, 1.0 / nt)
    C = sq_cost(source, target) if cost is None else cost
    _, g, _, viol, it = sinkhorn_plan(C, a, b, eps, iters, tol, polish=polish)
    return CouplingPlan(g / eps + np.log(b), target, eps, viol, it)


def conditional_logits(queries, plan: CouplingPlan) -> np.ndarray:
    return plan.duals[None, :] - sq_cost(queries, plan.target_points) / plan.eps


def resample_indices(queries, plan: CouplingPlan, rng: RngState) -> np.ndarray:
    """One target index per query row, drawn from the entropic conditional."""
    logits = conditional_logits(queries, plan)
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    np.cumsum(logits, axis=1, out=logits)
    u = rng.uniform(logits.shape[0]) * logits[:, -1]
    idx = (logits < u[:, None]).sum(axis=1)
    return np.minimum(idx, logits.shape[1] - 1)


def eot_conditional_resample(y, plan: CouplingPlan, rng: RngState) -> np.ndarray:
    """Draw one base atom for a single query point ``y``."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    return plan.target_points[resample_indices(y, plan, rng)[0]]


def resolve_eps(eps: float, mode: str, C=None) -> float:
    """Absolute ``eps``, or ``eps`` times the cost-matrix standard deviation."""
    if mode == "absolute":
        return float(eps)
    if mode == "relative":
        s = float(np.std(C)) if C is not None else 1.0
        return float(eps) * (s if s > 0 else 1.0)
    raise ValidationError(f"unknown eps mode {mode!r}")
