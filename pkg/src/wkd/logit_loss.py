"""Logit distillation losses with gradients w.r.t. the student logits.

All functions accept a single logit vector ``(n,)`` or a batch ``(B, n)``;
batch losses are means over examples. Teacher logits are constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from . import ot
from .errors import DimensionMismatch, ValidationError
from .numerics import log_sum_exp


@dataclass(frozen=True)
class LogitLossConfig:
    lam: float = 30.0
    tau: float = 2.0
    eta: float = ot.DEFAULT_ETA
    iters: int = ot.DEFAULT_ITERS
    separate_target: bool = True
    target_weight: float = 1.0
    # "objective": <C,Q> + eta*sum(Q log Q); "transport": <C,Q> only (value
    # reported differently, gradient is still the dual of the objective)
    wd_value: str = "objective"
    tol: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be nonnegative")
        if self.tau <= 0:
            raise ValidationError("temperature must be positive")
        if self.wd_value not in ("objective", "transport"):
            raise ValidationError(f"unknown wd_value {self.wd_value!r}")


@dataclass(frozen=True)
class WKDLResult:
    loss: float
    grad: np.ndarray
    wd: float
    transport_cost: float
    target: float


def log_softmax_t(z, tau: float = 1.0):
    z = np.asarray(z, dtype=float) / tau
    return z - log_sum_exp(z, axis=-1)[..., None]


def softmax_t(z, tau: float = 1.0):
    """Temperature softmax ``exp(z_i/tau) / sum_j exp(z_j/tau)``."""
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    return np.exp(log_softmax_t(z, tau))


def _batch(z):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    return np.atleast_2d(z), single


def kd_kl(z_t, z_s, tau: float = 1.0):
    """``KL(softmax(z_t/tau) || softmax(z_s/tau))`` and its gradient in ``z_s``.

    The gradient of the per-example KL is ``(p_s - p_t) / tau``.
    """
    zt, single = _batch(z_t)
    zs, _ = _batch(z_s)
    if zt.shape != zs.shape:
        raise DimensionMismatch(f"teacher {zt.shape} and student {zs.shape} logits differ")
    log_pt = log_softmax_t(zt, tau)
    log_ps = log_softmax_t(zs, tau)
    pt = np.exp(log_pt)
    kl = np.sum(xlogy(pt, pt) - pt * log_ps, axis=-1)
    grad = (np.exp(log_ps) - pt) / tau
    if single:
        return float(kl[0]), grad[0]
    return float(kl.mean()), grad / zt.shape[0]


def kl_div(p_t, p_s) -> float:
    """``sum_i p_t log(p_t / p_s)`` on probability vectors, ``0 log 0 = 0``."""
    p_t = np.asarray(p_t, dtype=float)
    p_s = np.asarray(p_s, dtype=float)
    return float(np.sum(xlogy(p_t, p_t) - xlogy(p_t, p_s)))


def _non_target(z, t):
    b, n = z.shape
    mask = np.ones((b, n), dtype=bool)
    mask[np.arange(b), t] = False
    return z[mask].reshape(b, n - 1), mask


def _submatrices(c, t, n):
    keep = np.array([np.delete(np.arange(n), k) for k in range(n)])
    return c[keep[t][:, :, None], keep[t][:, None, :]]


def wkd_l(z_t, z_s, cost, cfg: LogitLossConfig = LogitLossConfig(), target=None) -> WKDLResult:
    """Wasserstein logit distillation loss and gradient in the student logits.

    With ``separate_target`` the non-target logits of both models are
    softmax-normalized at temperature ``tau``, transported under the cost with
    the target row/column removed and weighted by ``lam``; the target term
    ``-softmax(z_t)_t log softmax(z_s)_t`` (temperature 1) is added. Without
    separation the loss is ``lam`` times the WD between the full tempered
    distributions.

    The WD gradient is taken through the Sinkhorn duals (envelope theorem),
    exact for the regularized objective at convergence.
    """
    zt, single = _batch(z_t)
    zs, _ = _batch(z_s)
    if zt.shape != zs.shape:
        raise DimensionMismatch(f"teacher {zt.shape} and student {zs.shape} logits differ")
    bsz, n = zt.shape
    c = np.asarray(getattr(cost, "values", cost), dtype=float)
    if c.shape != (n, n):
        raise DimensionMismatch(f"cost shape {c.shape} does not match {n} categories")
    grad = np.zeros_like(zs)
    target_loss = np.zeros(bsz)

    if cfg.separate_target:
        if target is None:
            raise ValidationError("separate_target needs target indices")
        t = np.broadcast_to(np.asarray(target, dtype=int), (bsz,))
        if np.any(t < 0) or np.any(t >= n):
            raise ValidationError("target index out of range")
        zt_nt, mask = _non_target(zt, t)
        zs_nt, _ = _non_target(zs, t)
        c_used = _submatrices(c, t, n)
    else:
        zt_nt, zs_nt, mask, c_used = zt, zs, None, c

    pt = softmax_t(zt_nt, cfg.tau)
    ps = softmax_t(zs_nt, cfg.tau)
    f, g, plan, _, _ = ot.sinkhorn_batch(pt, ps, c_used, cfg.eta, cfg.iters, cfg.tol)
    cmat = c_used if c_used.ndim == 3 else c_used[None]
    transport = np.sum(cmat * plan, axis=(1, 2))
    objective = transport + cfg.eta * np.sum(xlogy(plan, plan), axis=(1, 2))
    wd = objective if cfg.wd_value == "objective" else transport

    g = np.where(np.isfinite(g), g, 0.0)
    # softmax Jacobian (diag(p) - p pᵀ)/tau applied to the dual
    g_nt = ps * (g - np.sum(ps * g, axis=1, keepdims=True)) / cfg.tau
    if mask is None:
        grad += cfg.lam * g_nt
    else:
        grad[mask] += (cfg.lam * g_nt).ravel()
        rows = np.arange(bsz)
        pt1 = softmax_t(zt)[rows, t]
        log_ps1 = log_softmax_t(zs)
        target_loss = -pt1 * log_ps1[rows, t]
        gt = pt1[:, None] * np.exp(log_ps1)
        gt[rows, t] -= pt1
        grad += cfg.target_weight * gt

    loss = cfg.lam * wd + cfg.target_weight * target_loss
    if single:
        return WKDLResult(float(loss[0]), grad[0], float(wd[0]), float(transport[0]), float(target_loss[0]))
    return WKDLResult(float(loss.mean()), grad / bsz, float(wd.mean()), float(transport.mean()),
                      float(target_loss.mean()))


def cross_entropy(z, labels):
    """Mean cross-entropy of logits ``(B, n)`` against integer labels, with gradient."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    labels = np.asarray(labels, dtype=int)
    logp = log_softmax_t(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / z.shape[0]
