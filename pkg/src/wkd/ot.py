"""Entropy-regularized discrete optimal transport by log-domain Sinkhorn.

Potentials are stored in cost units, ``f = eta log u`` and ``g = eta log v``,
and the plan is ``Q_ij = exp((f_i + g_j - C_ij) / eta)``. One iteration is a
row update of ``f`` followed by a column update of ``g``, so column marginals
are exact after every iteration and the row marginals carry the residual.

Zero-mass entries get potential ``-inf`` internally, which removes them from
every log-sum-exp and leaves their plan rows/columns at exactly zero; the
reported duals for those coordinates are 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import DimensionMismatch, NumericalBlowup, ValidationError

DEFAULT_ETA = 0.05
DEFAULT_ITERS = 9
BLOWUP = 1e6
# below this C.max()/eta the precomputed kernel exp(-C/eta) cannot underflow
_KERNEL_RANGE = 30.0
# above this C.max()/eta a cold start converges slowly; "auto" anneals eta
ANNEAL_RANGE = 200.0
ANNEAL_FACTOR = 0.5
ANNEAL_STAGE_ITERS = 200
ANNEAL_STAGE_TOL = 1e-8


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    dual_f: np.ndarray
    dual_g: np.ndarray
    transport_cost: float
    objective: float
    iterations_run: int
    marginal_residual: float
    eta: float


def as_probvec(p, name: str = "p", tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > tol:
        raise ValidationError(f"{name} sums to {p.sum():.12g}, not 1")
    return p


def _lse_rows(pot, c, kernel):
    """``LSE_j (pot_j - c_ij)`` for batched scaled potentials ``(B, m)``.

    Every row has at least one finite term (marginals sum to 1), so the max
    shift is always finite and no masking is needed.
    """
    if kernel is not None:
        top = pot.max(axis=-1, keepdims=True)
        w = np.exp(pot - top)
        if kernel.ndim == 2:
            s = w @ kernel.T
        else:
            s = np.einsum("bij,bj->bi", kernel, w)
        return np.log(s) + top
    a = pot[:, None, :] - c
    top = a.max(axis=-1, keepdims=True)
    a -= top
    np.exp(a, out=a)
    return np.log(a.sum(axis=-1)) + top[..., 0]


def _check_blowup(pot, active):
    """Raise if a scaled potential is NaN, infinite or beyond ``BLOWUP``."""
    hi = np.abs(pot if active is None else np.where(active, pot, 0.0)).max()
    if not hi <= BLOWUP:
        if np.isnan(hi):
            raise NumericalBlowup("NaN in Sinkhorn potentials")
        raise NumericalBlowup("log-scaling magnitude exceeds 1e6")


def sinkhorn_batch(p, q, c, eta: float = DEFAULT_ETA, iters: int = DEFAULT_ITERS, tol: float | None = None,
                   f0=None, g0=None, method: str = "auto", anneal: bool | None = None):
    """Batched log-domain Sinkhorn.

    ``p`` is ``(B, n)``, ``q`` is ``(B, m)``, ``c`` is ``(n, m)`` or
    ``(B, n, m)``. Runs ``iters`` iterations, or stops early once the row
    marginal residual drops below ``tol``. ``method`` is ``"log"`` (plain
    log-sum-exp over ``(g - C)/eta``), ``"kernel"`` (stabilized products with
    a precomputed ``exp(-C/eta)``; only valid when it cannot underflow) or
    ``"auto"``.

    With ``anneal`` (default: only when ``max(C)/eta`` exceeds
    ``ANNEAL_RANGE``) part of the iteration budget is spent on a warm-start
    schedule ``eta_k = max(C) * 0.5**k`` down to ``eta``. Each stage runs
    until its row residual is below ``ANNEAL_STAGE_TOL``, capped at
    ``ANNEAL_STAGE_ITERS`` iterations and at half the remaining budget. The
    fixed point is unchanged; only the starting potentials are.

    Returns ``(f, g, plan, iterations_run, residual)`` with ``g`` centered to
    zero mean over its active coordinates.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    c = np.asarray(c, dtype=float)
    if eta <= 0:
        raise ValidationError("eta must be positive")
    if p.shape[0] != q.shape[0] or c.shape[-2:] != (p.shape[1], q.shape[1]):
        raise DimensionMismatch(f"marginals {p.shape}, {q.shape} do not match cost {c.shape}")
    if c.ndim == 3 and c.shape[0] != p.shape[0]:
        raise DimensionMismatch("batched cost must have the batch size of the marginals")

    cmax = float(np.max(c)) if c.size else 0.0
    if anneal is None:
        anneal = cmax / eta > ANNEAL_RANGE
    warm = 0
    if anneal:
        cur = cmax
        while cur > eta:
            cap = min(ANNEAL_STAGE_ITERS, (iters - warm) // 2)
            if cap < 1:
                break
            f0, g0, _, used, _ = sinkhorn_batch(p, q, c, cur, cap, ANNEAL_STAGE_TOL, f0, g0, anneal=False)
            warm += used
            cur *= ANNEAL_FACTOR
        iters -= warm

    if method == "auto":
        method = "kernel" if cmax / eta <= _KERNEL_RANGE else "log"
    # work with potentials in units of eta: F = f / eta, G = g / eta
    ce = c / eta
    kernel = np.exp(-ce) if method == "kernel" else None
    cet = np.swapaxes(ce, -1, -2)
    kernel_t = None if kernel is None else np.swapaxes(kernel, -1, -2)

    with np.errstate(divide="ignore"):
        logp = np.log(p)
        logq = np.log(q)
    active_p = None if np.all(p > 0) else p > 0
    active_q = None if np.all(q > 0) else q > 0
    big_f = np.zeros_like(p) if f0 is None else np.array(f0, dtype=float) / eta
    big_g = np.zeros_like(q) if g0 is None else np.array(g0, dtype=float) / eta
    if active_q is not None:
        big_g = np.where(active_q, big_g, -np.inf)

    residual = np.inf
    done = 0
    for it in range(iters):
        # log(0) - finite = -inf keeps zero-mass coordinates out of every LSE
        big_f = logp - _lse_rows(big_g, ce, kernel)
        big_g = logq - _lse_rows(big_f, cet, kernel_t)
        _check_blowup(big_f, active_p)
        _check_blowup(big_g, active_q)
        done = warm + it + 1
        if tol is not None:
            rows = np.exp(big_f + _lse_rows(big_g, ce, kernel))
            residual = float(np.max(np.abs(rows - p)))
            if residual < tol:
                break
    f = eta * big_f
    g = eta * big_g

    active_g = np.isfinite(g)
    shift = np.sum(np.where(active_g, g, 0.0), axis=1, keepdims=True) / np.maximum(active_g.sum(1, keepdims=True), 1)
    g = g - shift
    f = f + shift
    with np.errstate(invalid="ignore"):
        plan = np.exp((f[:, :, None] + g[:, None, :] - c) / eta)
    plan = np.nan_to_num(plan, nan=0.0)
    residual = float(max(np.max(np.abs(plan.sum(2) - p)), np.max(np.abs(plan.sum(1) - q))))
    return f, g, plan, done, residual


def sinkhorn(p, q, c, eta: float = DEFAULT_ETA, iters: int = DEFAULT_ITERS, tol: float | None = None,
             method: str = "auto", anneal: bool | None = None) -> TransportPlan:
    """Regularized OT between two probability vectors under cost ``c``.

    ``objective`` is ``<C, Q> + eta * sum(Q log Q)`` (with ``0 log 0 = 0``);
    ``transport_cost`` is ``<C, Q>`` alone.
    """
    p = as_probvec(p, "p")
    q = as_probvec(q, "q")
    c = np.asarray(getattr(c, "values", c), dtype=float)
    if c.shape != (p.size, q.size):
        raise DimensionMismatch(f"cost shape {c.shape} does not match marginals ({p.size}, {q.size})")
    f, g, plan, done, residual = sinkhorn_batch(p[None], q[None], c, eta, iters, tol, method=method,
                                                anneal=anneal)
    return _make_plan(f[0], g[0], plan[0], c, eta, done, residual)


def _make_plan(f, g, plan, c, eta, done, residual) -> TransportPlan:
    cost = float(np.sum(c * plan))
    objective = cost + eta * float(np.sum(xlogy(plan, plan)))
    f = np.where(np.isfinite(f), f, 0.0)
    g = np.where(np.isfinite(g), g, 0.0)
    return TransportPlan(plan, f, g, cost, objective, done, residual, float(eta))


def sinkhorn_eps_scaling(p, q, c, eta: float, iters_per_stage: int = 20, factor: float = 0.5,
                         final_iters: int = 200, tol: float | None = None) -> TransportPlan:
    """Sinkhorn with a decreasing ``eta`` schedule and warm-started potentials.

    Starts at ``eta0 = max(C)`` and shrinks by ``factor`` per stage until the
    target ``eta``; meant for small ``eta`` relative to the cost scale, where
    a cold start converges slowly.
    """
    p = as_probvec(p, "p")
    q = as_probvec(q, "q")
    c = np.asarray(getattr(c, "values", c), dtype=float)
    if c.shape != (p.size, q.size):
        raise DimensionMismatch(f"cost shape {c.shape} does not match marginals ({p.size}, {q.size})")
    cur = max(float(np.max(c)), eta)
    f = g = None
    while cur > eta:
        f, g, _, _, _ = sinkhorn_batch(p[None], q[None], c, cur, iters_per_stage, f0=f, g0=g)
        cur = max(cur * factor, eta)
    f, g, plan, done, residual = sinkhorn_batch(p[None], q[None], c, eta, final_iters, tol, f0=f, g0=g)
    return _make_plan(f[0], g[0], plan[0], c, eta, done, residual)


def wd_gradient(plan: TransportPlan) -> np.ndarray:
    """Gradient of the regularized objective w.r.t. the second marginal.

    This is the column dual, centered to zero mean; it is defined up to an
    additive constant, which the softmax Jacobian downstream annihilates.
    Coordinates with zero mass get 0.
    """
    return plan.dual_g.copy()
