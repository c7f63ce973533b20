"""PCA, k-means and the coding-rate view of low-rank approximation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coding_rate import RateConfig, coding_rate
from .errors import CountMismatch, ShapeMismatch
from .matcore import as_matrix, rng, sym_eigen

RANK_TOL = 1e-10
KMEANS_MAX_ITER = 300


@dataclass
class PcaResult:
    directions: np.ndarray  # D x C, orthonormal, sign-fixed
    variances: np.ndarray  # eigenvalue / N, descending
    coefficients: np.ndarray  # C x N, directions^T @ centered Z
    mean: np.ndarray  # D
    rank_deficient: bool = False


@dataclass
class KMeansResult:
    centroids: np.ndarray  # D x C
    assignments: np.ndarray  # N
    counts: np.ndarray  # C
    inertia: float
    n_iter: int
    inertia_history: list = field(default_factory=list)


@dataclass
class QbarSpec:
    """Columns of a rank-C surrogate and how many times each is replicated.

    ``source`` is one of ``principal_directions``, ``kmeans_centroids``
    or ``explicit``.
    """

    columns: np.ndarray  # D x C
    replication_counts: np.ndarray  # C, sums to N
    source: str = "explicit"

    @classmethod
    def from_principal_directions(cls, Z, counts):
        counts = np.asarray(counts, dtype=np.int64)
        res = pca(Z, len(counts))
        return cls(res.directions, counts, "principal_directions")

    @classmethod
    def from_kmeans(cls, result):
        return cls(result.centroids, np.asarray(result.counts), "kmeans_centroids")

    def materialize(self):
        counts = np.asarray(self.replication_counts, dtype=np.int64)
        if np.any(counts < 0):
            raise CountMismatch("replication counts must be non-negative")
        return np.repeat(np.asarray(self.columns, dtype=np.float64), counts, axis=1)


@dataclass
class LowRankQuality:
    gap: float
    rate_z: float
    rate_qbar: float
    closed_form: Optional[float] = None


def center_columns(Z):
    """Subtract the column mean. Returns ``(centered, mean)``."""
    Z = as_matrix(Z, "Z")
    mean = Z.mean(axis=1)
    return Z - mean[:, None], mean


def fix_signs(U):
    """Flip each column so its largest-magnitude entry is positive.

    Ties go to the first such entry.
    """
    U = np.array(U, dtype=np.float64)
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def top_eigvecs(Z, C):
    """Top-C eigenpairs of Z Z^T, computed from whichever Gram side is smaller.

    Returns ``(eigenvalues, U, rank_deficient)``; directions beyond the
    numerical rank are completed with an orthonormal complement.
    """
    D, N = Z.shape
    if not 1 <= C <= min(D, N):
        raise ShapeMismatch(f"C={C} must be in [1, min(D, N)={min(D, N)}]")
    if D <= N:
        lam, V = sym_eigen(Z @ Z.T)
        lam = np.clip(lam[:C], 0.0, None)
        U = V[:, :C]
        top = lam[0] if len(lam) else 0.0
        deficient = bool(np.any(lam <= RANK_TOL * max(top, 1.0)))
        return lam, U, deficient
    lam, V = sym_eigen(Z.T @ Z)
    lam = np.clip(lam[:C], 0.0, None)
    top = lam[0] if len(lam) else 0.0
    ok = lam > RANK_TOL * max(top, 1.0)
    U = np.zeros((D, C))
    U[:, ok] = (Z @ V[:, :C][:, ok]) / np.sqrt(lam[ok])
    if not np.all(ok):
        # complete with directions orthogonal to the recovered ones
        known = U[:, ok]
        Q, _ = np.linalg.qr(np.hstack([known, np.eye(D)]))
        U[:, ~ok] = Q[:, known.shape[1] : known.shape[1] + int(np.sum(~ok))]
    return lam, U, bool(not np.all(ok))


def pca(Z, C, center=True):
    """Leading C principal directions of Z (columns are samples)."""
    Z = as_matrix(Z, "Z")
    if center:
        Zc, mean = center_columns(Z)
    else:
        Zc, mean = Z, np.zeros(Z.shape[0])
    lam, U, deficient = top_eigvecs(Zc, C)
    U = fix_signs(U)
    return PcaResult(U, lam / Zc.shape[1], U.T @ Zc, mean, deficient)


def best_rank_c_approx(Z, C):
    """Eckart-Young optimal rank-C approximation U U^T Z (no centering)."""
    Z = as_matrix(Z, "Z")
    _, U, _ = top_eigvecs(Z, C)
    return U @ (U.T @ Z)


def pca_segment(Z, C):
    """Label each column by its most positive sign-fixed principal coefficient.

    Ties resolve to the lowest direction index.
    """
    res = pca(Z, C)
    return np.argmax(res.coefficients, axis=0)


def _sq_dists(Z, V):
    # N x C squared distances
    return (
        np.sum(Z * Z, axis=0)[:, None]
        - 2.0 * (Z.T @ V)
        + np.sum(V * V, axis=0)[None, :]
    ).clip(min=0.0)


def _kmeans_pp(Z, C, gen):
    N = Z.shape[1]
    chosen = [int(gen.integers(N))]
    d2 = np.sum((Z - Z[:, [chosen[0]]]) ** 2, axis=0)
    for _ in range(1, C):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a centre; take the first unused
            unused = np.setdiff1d(np.arange(N), chosen)
            nxt = int(unused[0])
        else:
            nxt = int(gen.choice(N, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((Z - Z[:, [nxt]]) ** 2, axis=0))
    return Z[:, chosen].copy()


def kmeans(Z, C, seed=0, max_iter=KMEANS_MAX_ITER):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments repeat or after ``max_iter`` iterations. An empty
    cluster is re-seeded at the point farthest from its current centroid.
    """
    Z = as_matrix(Z, "Z")
    N = Z.shape[1]
    if not 1 <= C <= N:
        raise ShapeMismatch(f"need 1 <= C <= N, got C={C}, N={N}")
    gen = rng(seed)
    V = _kmeans_pp(Z, C, gen)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(Z, V)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(N), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=C)
        for c in np.flatnonzero(counts == 0):
            dist = d2[np.arange(N), assign]
            far = int(np.argmax(dist))
            assign[far] = c
            d2[far, :] = 0.0
            counts = np.bincount(assign, minlength=C)
        for c in range(C):
            V[:, c] = Z[:, assign == c].mean(axis=1)
    counts = np.bincount(assign, minlength=C)
    inertia = float(np.sum((Z - V[:, assign]) ** 2))
    return KMeansResult(V, assign, counts, inertia, it, history)


def lowrank_quality(Z, spec, cfg=None):
    """|R(Z) - R(Qbar)| for the replicated surrogate described by ``spec``."""
    cfg = cfg or RateConfig()
    Z = as_matrix(Z, "Z")
    D, N = Z.shape
    counts = np.asarray(spec.replication_counts, dtype=np.int64)
    if int(counts.sum()) != N:
        raise CountMismatch(f"counts sum to {int(counts.sum())}, expected N={N}")
    cols = as_matrix(spec.columns, "Qbar columns")
    if cols.shape != (D, len(counts)):
        raise ShapeMismatch(f"columns shape {cols.shape} != ({D}, {len(counts)})")
    rate_z = coding_rate(Z, cfg)
    rate_q = coding_rate(spec.materialize(), cfg)
    closed = None
    if spec.source == "principal_directions":
        closed = closed_form_qbar_rate(counts, D, N, cfg)
    return LowRankQuality(abs(rate_z - rate_q), rate_z, rate_q, closed)


def closed_form_qbar_rate(counts, D, N, cfg=None):
    """1/2 sum_c log(1 + D/(N eps^2) n_c): the rate of replicated orthonormal columns."""
    cfg = cfg or RateConfig()
    counts = np.asarray(counts, dtype=np.float64)
    return 0.5 * float(np.sum(np.log1p(cfg.scale(D, N) * counts)))


def proportional_counts(weights, N):
    """Integer counts summing to N, proportional to ``weights`` (largest remainder)."""
    w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
    if w.sum() <= 0:
        w = np.ones_like(w)
    raw = N * w / w.sum()
    counts = np.floor(raw).astype(np.int64)
    rem = N - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts
