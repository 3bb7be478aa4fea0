"""Category interrelations (IR) and the transport cost derived from them.

A feature bank holds one ``u x b`` matrix per category (columns are the
penultimate-layer features of ``b`` examples). IR is either CKA (normalized
HSIC) between the per-category kernel matrices or the cosine similarity of
category prototypes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .errors import DegenerateMedian, InvalidSpec, SizeMismatch, ZeroNormPrototype

METHODS = ("cka-linear", "cka-poly", "cka-rbf", "cosine-centroid", "cosine-classifier")


@dataclass(frozen=True)
class IRMatrix:
    values: np.ndarray
    method: str

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    kappa: float

    @property
    def n(self) -> int:
        return self.values.shape[0]


def as_bank(bank) -> np.ndarray:
    """Stack a feature bank into an ``(n, u, b)`` array and validate it."""
    x = np.asarray(bank, dtype=float)
    if x.ndim != 3:
        raise SizeMismatch(f"feature bank must be (n, u, b), got shape {x.shape}")
    if x.shape[2] < 2:
        raise SizeMismatch("each category needs at least b = 2 examples")
    if not np.all(np.isfinite(x)):
        raise InvalidSpec("feature bank has non-finite entries")
    return x


def centering(b: int) -> np.ndarray:
    return np.eye(b) - np.full((b, b), 1.0 / b)


def kernel_matrix(x, kind: str = "linear", degree: int = 2, alpha: float = 0.4,
                  median_fallback: bool = True) -> np.ndarray:
    """``b x b`` kernel of the columns of ``x`` (``u x b``).

    ``linear``: ``XᵀX``; ``poly``: ``(XᵀX + 1)**degree`` entrywise;
    ``rbf``: ``exp(-D / (2 alpha² Med(D)))`` with ``D`` the squared pairwise
    distances and ``Med`` the median over all entries of ``D``.
    """
    x = np.asarray(x, dtype=float)
    gram = x.T @ x
    if kind == "linear":
        return gram
    if kind == "poly":
        if degree not in (2, 3, 4):
            raise InvalidSpec(f"polynomial degree must be 2, 3 or 4, got {degree}")
        return (gram + 1.0) ** degree
    if kind == "rbf":
        if alpha <= 0:
            raise InvalidSpec("rbf bandwidth must be positive")
        d = np.diag(gram)
        dist = d[:, None] + d[None, :] - 2.0 * gram
        np.fill_diagonal(dist, 0.0)
        dist = np.maximum(dist, 0.0)
        med = float(np.median(dist))
        if med <= 0.0:
            if not median_fallback:
                raise DegenerateMedian("all pairwise distances are zero")
            warnings.warn("rbf kernel: zero median distance, using unit bandwidth", RuntimeWarning)
            med = 1.0
        return np.exp(-dist / (2.0 * alpha**2 * med))
    raise InvalidSpec(f"unknown kernel {kind!r}")


def hsic(ki, kj) -> float:
    """``tr(Ki H Kj H) / (b-1)²`` with ``H`` the centering matrix."""
    ki = np.asarray(ki, dtype=float)
    kj = np.asarray(kj, dtype=float)
    if ki.shape != kj.shape or ki.ndim != 2 or ki.shape[0] != ki.shape[1]:
        raise SizeMismatch(f"kernel shapes {ki.shape} and {kj.shape} do not match")
    b = ki.shape[0]
    if b < 2:
        raise SizeMismatch("HSIC needs b >= 2")
    kic = ki - ki.mean(axis=0, keepdims=True)
    kic = kic - kic.mean(axis=1, keepdims=True)
    kjc = kj - kj.mean(axis=0, keepdims=True)
    kjc = kjc - kjc.mean(axis=1, keepdims=True)
    # tr(HKiH HKjH) == tr(Ki H Kj H) since H is idempotent
    return float(np.sum(kic * kjc.T)) / (b - 1) ** 2


def _method_tag(method: str, degree: int, alpha: float) -> str:
    if method == "cka-poly":
        return f"cka-poly({degree})"
    if method == "cka-rbf":
        return f"cka-rbf({alpha:g})"
    return method


def ir_matrix(bank, method: str = "cka-linear", *, degree: int = 2, alpha: float = 0.4,
              classifier_weights=None) -> IRMatrix:
    """Pairwise interrelations between the categories of a feature bank.

    CKA methods use the normalized HSIC of the per-category kernels. Cosine
    methods compare prototypes (class centroids, or the columns of a ``u x n``
    classifier weight matrix) and map ``cos`` to ``(1 + cos) / 2``.
    """
    if method.startswith("cka"):
        x = as_bank(bank)
        kind = {"cka-linear": "linear", "cka-poly": "poly", "cka-rbf": "rbf"}.get(method)
        if kind is None:
            raise InvalidSpec(f"unknown IR method {method!r}")
        n, _, b = x.shape
        h = centering(b)
        centered = [h @ kernel_matrix(x[i], kind, degree, alpha) @ h for i in range(n)]
        flat = np.stack([c.ravel() for c in centered])
        # tr(HKiH HKjH) for symmetric centered kernels is a plain inner product
        hs = flat @ flat.T / (b - 1) ** 2
        diag = np.sqrt(np.clip(np.diag(hs), 0.0, None))
        denom = np.outer(diag, diag)
        with np.errstate(invalid="ignore", divide="ignore"):
            ir = np.where(denom > 0, hs / denom, 0.0)
        ir = np.clip(0.5 * (ir + ir.T), 0.0, 1.0)
    elif method in ("cosine-centroid", "cosine-classifier"):
        if method == "cosine-centroid":
            protos = as_bank(bank).mean(axis=2)
        else:
            if classifier_weights is None:
                raise InvalidSpec("cosine-classifier needs classifier weights (u x n)")
            protos = np.asarray(classifier_weights, dtype=float).T
        norms = np.linalg.norm(protos, axis=1)
        if np.any(norms == 0):
            raise ZeroNormPrototype(f"prototype(s) {np.flatnonzero(norms == 0).tolist()} have zero norm")
        unit = protos / norms[:, None]
        cos = np.clip(unit @ unit.T, -1.0, 1.0)
        ir = 0.5 * (1.0 + 0.5 * (cos + cos.T))
    else:
        raise InvalidSpec(f"unknown IR method {method!r}")
    np.fill_diagonal(ir, 1.0)
    return IRMatrix(ir, _method_tag(method, degree, alpha))


def cost_matrix(ir, kappa: float = 1.0) -> CostMatrix:
    """Ground cost ``1 - exp(-kappa (1 - IR))``."""
    if kappa <= 0:
        raise InvalidSpec("kappa must be positive")
    values = ir.values if isinstance(ir, IRMatrix) else np.asarray(ir, dtype=float)
    c = 1.0 - np.exp(-kappa * (1.0 - values))
    np.fill_diagonal(c, 0.0)
    return CostMatrix(c, float(kappa))


def write_matrix_csv(path, m) -> None:
    """Header-less rows, 17 significant digits per value."""
    m = np.asarray(getattr(m, "values", m), dtype=float)
    lines = [",".join(f"{v:.17g}" for v in row) for row in m]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in row.split(",")] for row in rows])

