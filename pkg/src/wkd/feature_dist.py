"""Parametric modelling of feature maps and the divergences between models.

A feature map of ``l`` channels on an ``h x w`` grid is viewed as the matrix
``F`` (``l x m``, ``m = h w``): column ``f_i`` is the feature at one spatial
position, row ``j`` is one channel over all positions.

The batched :func:`feature_loss` is what training uses. It splits the maps
into a ``k x k`` grid, fits one model per cell for teacher and student,
sums the per-cell divergences and averages over the batch; for every
trainable kind it also returns the gradient w.r.t. the student map.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from . import ot
from ._io import atomic_write_text
from .errors import DimensionMismatch, NegativeSpectrum, SizeMismatch, ValidationError
from .numerics import sqrtm_psd

RIDGE = 1e-5
SCALE_FLOOR = 1e-5
RATE_EPS = 1e-5

TRAINABLE = ("wd-diag", "kl-diag", "symkl-diag", "laplace-kl", "exp-kl", "spatial-1st",
             "spatial-2nd", "channel-1st", "channel-2nd", "pmf-wd")
FORWARD_ONLY = ("wd-full", "g2denet")
KINDS = TRAINABLE + FORWARD_ONLY


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return "full" if self.cov is not None else "diag"

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class LaplaceStats:
    mean: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True)
class ExponentialStats:
    rate: np.ndarray


@dataclass(frozen=True)
class Pmf:
    points: np.ndarray  # l x m, columns are support points
    masses: np.ndarray


def as_matrix(f) -> np.ndarray:
    """``(l, h, w)`` or ``(l, m)`` feature map as an ``l x m`` matrix."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 3:
        return f.reshape(f.shape[0], -1)
    if f.ndim == 2:
        return f
    raise SizeMismatch(f"feature map must be (l, h, w) or (l, m), got {f.shape}")


def grid_cells(h: int, w: int, k: int):
    """Row/column slices of a ``k x k`` grid; the last cell per axis takes the remainder."""
    if k < 1 or k > h or k > w:
        raise ValidationError(f"grid side {k} does not fit a {h}x{w} map")
    rh, rw = h // k, w // k
    cells = []
    for i in range(k):
        r = slice(i * rh, h if i == k - 1 else (i + 1) * rh)
        for j in range(k):
            c = slice(j * rw, w if j == k - 1 else (j + 1) * rw)
            cells.append((r, c))
    return cells


# -- single-map statistics ---------------------------------------------------

def channel_moments(f, mode: str = "diag", ridge: float = RIDGE) -> GaussianStats:
    """Mean and (1/m) covariance over spatial positions, ridge on the diagonal."""
    x = as_matrix(f)
    m = x.shape[1]
    if m < 1:
        raise SizeMismatch("feature map has no spatial positions")
    mu = x.mean(axis=1)
    d = x - mu[:, None]
    if mode == "full":
        cov = d @ d.T / m
        cov = 0.5 * (cov + cov.T) + ridge * np.eye(x.shape[0])
        return GaussianStats(mu, cov=cov)
    if mode == "diag":
        return GaussianStats(mu, std=np.sqrt(np.mean(d * d, axis=1) + ridge))
    raise ValidationError(f"unknown covariance mode {mode!r}")


def spatial_moments(f):
    """Raw spatial moments: mean over channels ``(m,)`` and ``FᵀF / l`` ``(m, m)``."""
    x = as_matrix(f)
    l = x.shape[0]
    return x.mean(axis=0), x.T @ x / l


def channel_raw_moment(f) -> np.ndarray:
    """Raw (non-centered) channel second moment ``F Fᵀ / m``."""
    x = as_matrix(f)
    return x @ x.T / x.shape[1]


def fit_laplace(f) -> LaplaceStats:
    """Per-channel MLE: lower median and mean absolute deviation from it."""
    x = as_matrix(f)
    mu = _lower_median(x)
    scale = np.maximum(np.mean(np.abs(x - mu[:, None]), axis=1), SCALE_FLOOR)
    return LaplaceStats(mu, scale)


def fit_exponential(f) -> ExponentialStats:
    """Per-channel rate ``1 / (mean(max(f, 0)) + 1e-5)``."""
    x = np.maximum(as_matrix(f), 0.0)
    return ExponentialStats(1.0 / (x.mean(axis=1) + RATE_EPS))


def fit_pmf(f) -> Pmf:
    x = as_matrix(f)
    return Pmf(x, np.full(x.shape[1], 1.0 / x.shape[1]))


def _lower_median(x):
    m = x.shape[-1]
    return np.sort(x, axis=-1)[..., (m - 1) // 2]


# -- divergences -------------------------------------------------------------

def _same_kind(a: GaussianStats, b: GaussianStats):
    if a.kind != b.kind:
        raise ValidationError("cannot compare full and diagonal Gaussians")
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions {a.dim} and {b.dim} differ")


def gaussian_wd(a: GaussianStats, b: GaussianStats):
    """Closed-form 2-Wasserstein terms ``(D_mean, D_cov)`` between Gaussians.

    Full: ``tr(Sa + Sb - 2 (Sa^½ Sb Sa^½)^½)``; diagonal: ``||std_a - std_b||²``.
    """
    _same_kind(a, b)
    d_mean = float(np.sum((a.mean - b.mean) ** 2))
    if a.kind == "diag":
        d_cov = float(np.sum((a.std - b.std) ** 2))
    else:
        ra = sqrtm_psd(a.cov)
        mid = ra @ b.cov @ ra
        cross = sqrtm_psd(0.5 * (mid + mid.T))
        d_cov = float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    if d_cov < -1e-8:
        raise NegativeSpectrum(f"covariance term {d_cov:.3e} is negative")
    return max(d_mean, 0.0), max(d_cov, 0.0)


def gaussian_kl(a: GaussianStats, b: GaussianStats) -> float:
    """``KL(a || b)`` between diagonal Gaussians."""
    _same_kind(a, b)
    r = a.std / b.std
    return float(0.5 * np.sum(((a.mean - b.mean) / b.std) ** 2 + r * r - 2.0 * np.log(r) - 1.0))


def gaussian_sym_kl(a: GaussianStats, b: GaussianStats) -> float:
    """Symmetric (Jeffreys) KL between diagonal Gaussians."""
    _same_kind(a, b)
    dm2 = (a.mean - b.mean) ** 2
    va, vb = a.std**2, b.std**2
    return float(0.5 * np.sum(dm2 * (1.0 / va + 1.0 / vb) + vb / va + va / vb - 2.0))


def laplace_kl(a: LaplaceStats, b: LaplaceStats) -> float:
    d = np.abs(a.mean - b.mean)
    return float(np.sum(np.log(b.scale / a.scale) + d / b.scale + a.scale / b.scale * np.exp(-d / a.scale) - 1.0))


def exponential_kl(a: ExponentialStats, b: ExponentialStats) -> float:
    return float(np.sum(np.log(a.rate / b.rate) + b.rate / a.rate - 1.0))


def cosine_cost(x, y):
    """``1 - cos`` between the columns of ``x`` and ``y``; zero columns get unit vectors 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx = np.linalg.norm(x, axis=-2, keepdims=True)
    ny = np.linalg.norm(y, axis=-2, keepdims=True)
    ux = np.divide(x, nx, out=np.zeros_like(x), where=nx > 0)
    uy = np.divide(y, ny, out=np.zeros_like(y), where=ny > 0)
    return 1.0 - np.swapaxes(ux, -1, -2) @ uy


def pmf_wd(a: Pmf, b: Pmf, eta: float = ot.DEFAULT_ETA, iters: int = ot.DEFAULT_ITERS,
           tol: float | None = None) -> float:
    """Discrete WD between empirical feature PMFs under the cosine cost.

    Zero-norm support points are dropped and the remaining mass renormalized.
    """
    pa = _drop_zero_columns(a)
    pb = _drop_zero_columns(b)
    c = cosine_cost(pa.points, pb.points)
    return ot.sinkhorn(pa.masses, pb.masses, c, eta, iters, tol).transport_cost


def _drop_zero_columns(p: Pmf) -> Pmf:
    keep = np.linalg.norm(p.points, axis=0) > 0
    if not np.any(keep):
        raise ValidationError("PMF has no support point with nonzero norm")
    w = p.masses[keep]
    return Pmf(p.points[:, keep], w / w.sum())


def g2denet_embedding(g: GaussianStats) -> np.ndarray:
    """``sqrtm([[S + mu muᵀ, mu], [muᵀ, 1]])``."""
    if g.kind != "full":
        raise ValidationError("the embedding needs a full covariance")
    l = g.dim
    e = np.empty((l + 1, l + 1))
    e[:l, :l] = g.cov + np.outer(g.mean, g.mean)
    e[:l, l] = g.mean
    e[l, :l] = g.mean
    e[l, l] = 1.0
    return sqrtm_psd(e)


def g2denet_distance(a: GaussianStats, b: GaussianStats) -> float:
    _same_kind(a, b)
    return float(np.linalg.norm(g2denet_embedding(a) - g2denet_embedding(b)))


def moment_frobenius(a, b) -> float:
    """Squared Frobenius (or Euclidean) distance between moment tensors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise SizeMismatch(f"moment shapes {a.shape} and {b.shape} differ")
    return float(np.sum((a - b) ** 2))


# -- batched, grid-pooled losses ---------------------------------------------

def _cell_loss(kind, t, s, gamma, eta, iters):
    """Per-example loss and student gradient for one cell.

    ``t`` and ``s`` are ``(B, l, m)``. Returns ``(loss (B,), grad or None)``.
    """
    bsz, l, m = s.shape
    if kind in ("wd-diag", "kl-diag", "symkl-diag"):
        mt, ms = t.mean(-1), s.mean(-1)
        ds = s - ms[..., None]
        dt = t - mt[..., None]
        st = np.sqrt(np.mean(dt * dt, -1) + RIDGE)
        ss = np.sqrt(np.mean(ds * ds, -1) + RIDGE)
        dm = ms - mt
        if kind == "wd-diag":
            loss = gamma * np.sum(dm * dm, -1) + np.sum((st - ss) ** 2, -1)
            g_mu, g_std = 2.0 * gamma * dm, 2.0 * (ss - st)
        elif kind == "kl-diag":
            r = st / ss
            loss = 0.5 * np.sum((dm / ss) ** 2 + r * r - 2.0 * np.log(r) - 1.0, -1)
            g_mu = dm / ss**2
            g_std = (ss**2 - dm**2 - st**2) / ss**3
        else:
            vt, vs = st**2, ss**2
            loss = 0.5 * np.sum(dm**2 * (1 / vt + 1 / vs) + vs / vt + vt / vs - 2.0, -1)
            g_mu = dm * (1 / vt + 1 / vs)
            g_std = -dm**2 / ss**3 + ss / vt - vt / ss**3
        grad = (g_mu[..., None] + (g_std / ss)[..., None] * ds) / m
        return loss, grad

    if kind == "laplace-kl":
        mt, ms = _lower_median(t), _lower_median(s)
        at = np.abs(t - mt[..., None]).mean(-1)
        diff_s = s - ms[..., None]
        as_ = np.abs(diff_s).mean(-1)
        nt = np.maximum(at, SCALE_FLOOR)
        ns = np.maximum(as_, SCALE_FLOOR)
        d = np.abs(mt - ms)
        e = np.exp(-d / nt)
        loss = np.sum(np.log(ns / nt) + d / ns + nt / ns * e - 1.0, -1)
        g_ns = (1.0 / ns - d / ns**2 - nt / ns**2 * e) * (as_ >= SCALE_FLOOR)
        g_ms = np.sign(ms - mt) * (1.0 / ns - e / ns)
        sgn = np.sign(diff_s)
        grad = g_ns[..., None] * sgn / m
        # scale depends on the median through |s - median|
        g_ms = g_ms - g_ns * sgn.sum(-1) / m
        idx = np.argsort(s, axis=-1, kind="stable")[..., (m - 1) // 2]
        np.put_along_axis(grad, idx[..., None],
                          np.take_along_axis(grad, idx[..., None], -1) + g_ms[..., None], -1)
        return loss, grad

    if kind == "exp-kl":
        bt = 1.0 / (np.maximum(t, 0.0).mean(-1) + RATE_EPS)
        bs = 1.0 / (np.maximum(s, 0.0).mean(-1) + RATE_EPS)
        loss = np.sum(np.log(bt / bs) + bs / bt - 1.0, -1)
        g_b = 1.0 / bt - 1.0 / bs
        grad = (-g_b * bs**2)[..., None] * (s > 0) / m
        return loss, grad

    if kind == "channel-1st":
        dm = s.mean(-1) - t.mean(-1)
        return np.sum(dm * dm, -1), np.broadcast_to(2.0 * dm[..., None] / m, s.shape).copy()

    if kind == "channel-2nd":
        diff = (s @ np.swapaxes(s, -1, -2) - t @ np.swapaxes(t, -1, -2)) / m
        return np.sum(diff**2, (-1, -2)), 4.0 * diff @ s / m

    if kind in ("spatial-1st", "spatial-2nd"):
        if t.shape != s.shape:
            raise DimensionMismatch("spatial moments need equal spatial sizes")
        if kind == "spatial-1st":
            dm = s.mean(-2) - t.mean(-2)
            return np.sum(dm * dm, -1), np.broadcast_to(2.0 * dm[:, None, :] / l, s.shape).copy()
        diff = (np.swapaxes(s, -1, -2) @ s - np.swapaxes(t, -1, -2) @ t) / l
        return np.sum(diff**2, (-1, -2)), 4.0 * s @ diff / l

    if kind == "pmf-wd":
        nt = np.linalg.norm(t, axis=1)
        ns = np.linalg.norm(s, axis=1)
        wt = (nt > 0).astype(float)
        ws = (ns > 0).astype(float)
        if np.any(wt.sum(-1) == 0) or np.any(ws.sum(-1) == 0):
            raise ValidationError("PMF has no support point with nonzero norm")
        wt /= wt.sum(-1, keepdims=True)
        ws /= ws.sum(-1, keepdims=True)
        c = cosine_cost(t, s)
        _, _, plan, _, _ = ot.sinkhorn_batch(wt, ws, c, eta, iters)
        # regularized objective, so that holding the plan fixed gives its exact gradient
        loss = np.sum(c * plan + eta * xlogy(plan, plan), (-1, -2))
        ut = np.divide(t, nt[:, None, :], out=np.zeros_like(t), where=nt[:, None, :] > 0)
        us = np.divide(s, ns[:, None, :], out=np.zeros_like(s), where=ns[:, None, :] > 0)
        cos = 1.0 - c
        # d(1 - cos_ij)/d s_j = -(ut_i - cos_ij us_j) / |s_j|; plan held fixed
        proj = ut @ plan - us * np.sum(plan * cos, axis=1)[:, None, :]
        grad = -np.divide(proj, ns[:, None, :], out=np.zeros_like(proj), where=ns[:, None, :] > 0)
        return loss, grad

    if kind in ("wd-full", "g2denet"):
        out = np.empty(bsz)
        for b in range(bsz):
            ga = channel_moments(t[b], "full")
            gb = channel_moments(s[b], "full")
            if kind == "wd-full":
                d_mean, d_cov = gaussian_wd(ga, gb)
                out[b] = gamma * d_mean + d_cov
            else:
                out[b] = g2denet_distance(ga, gb)
        return out, None

    raise ValidationError(f"unknown feature loss {kind!r}")


def feature_loss(kind: str, teacher, student, grid: int = 1, gamma: float = 2.0,
                 eta: float = ot.DEFAULT_ETA, iters: int = ot.DEFAULT_ITERS):
    """Grid-pooled feature distillation loss, averaged over the batch.

    ``teacher`` and ``student`` are ``(B, l, h, w)`` (or a single ``(l, h, w)``
    map) with equal channel counts. Returns ``(loss, grad)`` where ``grad``
    has the student's shape, or is ``None`` for the forward-only kinds.
    """
    t = np.asarray(teacher, dtype=float)
    s = np.asarray(student, dtype=float)
    single = s.ndim == 3
    if single:
        t, s = t[None], s[None]
    if t.ndim != 4 or s.ndim != 4 or t.shape[:2] != s.shape[:2]:
        raise DimensionMismatch(f"teacher {t.shape} and student {s.shape} are incompatible")
    if gamma < 0:
        raise ValidationError("gamma must be nonnegative")
    bsz = s.shape[0]
    cells_t = grid_cells(t.shape[2], t.shape[3], grid)
    cells_s = grid_cells(s.shape[2], s.shape[3], grid)
    total = np.zeros(bsz)
    grad = None if kind in FORWARD_ONLY else np.zeros_like(s)
    for (rt, ct), (rs, cs) in zip(cells_t, cells_s):
        tc = t[:, :, rt, ct].reshape(bsz, t.shape[1], -1)
        sc = s[:, :, rs, cs]
        loss, g = _cell_loss(kind, tc, sc.reshape(bsz, s.shape[1], -1), gamma, eta, iters)
        total += loss
        if grad is not None:
            grad[:, :, rs, cs] += g.reshape(sc.shape)
    if single:
        return float(total[0]), None if grad is None else grad[0]
    return float(total.mean()), None if grad is None else grad / bsz


def wkd_f_loss(teacher, student, grid: int = 1, gamma: float = 2.0, mode: str = "diag"):
    """``sum over cells of gamma * D_mean + D_cov`` with Gaussian feature models.

    The gradient w.r.t. the student map is returned in diagonal mode only
    (``None`` for full covariances).
    """
    if mode not in ("diag", "full"):
        raise ValidationError(f"unknown covariance mode {mode!r}")
    return feature_loss("wd-diag" if mode == "diag" else "wd-full", teacher, student, grid, gamma)


# -- CSV interchange ---------------------------------------------------------

def write_gaussian_csv(path, g: GaussianStats) -> None:
    rows = [g.mean] + ([g.std] if g.kind == "diag" else list(g.cov))
    atomic_write_text(path, "".join(",".join(f"{v:.17g}" for v in r) + "\n" for r in rows))


def read_gaussian_csv(path, kind: str | None = None) -> GaussianStats:
    rows = [np.array([float(v) for v in line.split(",")])
            for line in Path(path).read_text().splitlines() if line.strip()]
    mean = rows[0]
    if kind is None:
        kind = "diag" if len(rows) == 2 else "full"
    if kind == "diag":
        return GaussianStats(mean, std=rows[1])
    return GaussianStats(mean, cov=np.stack(rows[1:]))
