"""Dense linear-algebra kernels shared by the rest of the package.

The eigensolver is a parallel-ordered cyclic Jacobi method: every sweep
visits all index pairs through a round-robin schedule, and the pairs of one
round are disjoint so their rotations are applied together as array ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, NegativeSpectrum, NoConvergence, NonSymmetric, ShapeMismatch

SYMMETRY_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
CLAMP_TOL = 1e-10
NEGATIVE_TOL = 1e-6


@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, orthonormal

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint pair schedule covering every (p, q) once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def check_symmetric(a: np.ndarray, tol: float = SYMMETRY_TOL) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonSymmetric("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > tol * scale:
        raise NonSymmetric(f"max-abs asymmetry {asym:.3e} exceeds tolerance")
    return a


def sym_eig(a: np.ndarray, max_sweeps: int = JACOBI_MAX_SWEEPS, tol: float = JACOBI_TOL) -> SymEig:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues are returned in descending order with matching columns of
    the orthogonal eigenvector matrix.
    """
    a = check_symmetric(a)
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n <= 1:
        return SymEig(np.diag(a).copy(), v)
    schedule = _round_robin(n)
    norm = np.linalg.norm(a)
    off_mask = ~np.eye(n, dtype=bool)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a[off_mask] ** 2))
        if off <= tol * norm or norm == 0.0:
            break
        for p, q in schedule:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            active = apq != 0.0
            safe = np.where(active, apq, 1.0)
            zeta = (aqq - app) / (2.0 * safe)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            # columns, then rows
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    else:
        off = np.sqrt(np.sum(a[off_mask] ** 2))
        if off > tol * norm:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return SymEig(w[order], v[:, order])


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; tiny negative eigenvalues are clamped to 0."""
    eig = sym_eig(a)
    w = eig.eigenvalues
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w.min() < -NEGATIVE_TOL * scale:
        raise NegativeSpectrum(f"eigenvalue {w.min():.3e} is negative")
    w = np.where(w < CLAMP_TOL, 0.0, w)
    v = eig.eigenvectors
    r = (v * np.sqrt(w)) @ v.T
    return 0.5 * (r + r.T)


def log_sum_exp(v, axis=None):
    """``log(sum(exp(v)))`` shifted by the max so large inputs do not overflow.

    ``-inf`` entries contribute zero mass; an all ``-inf`` slice gives ``-inf``.
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise EmptyInput("log_sum_exp of an empty input")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def prng(seed: int) -> np.random.Generator:
    """Seeded stream backed by numpy's PCG64 bit generator.

    PCG64 (permuted congruential generator, 128-bit state) with numpy's
    ``SeedSequence`` seeding; normals use numpy's ziggurat sampler. Equal
    seeds give bit-identical streams.
    """
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
