"""Dense matrix kernel: log-determinants, symmetric eigensolvers,
orthonormalization and seeded random generation.

Matrices are plain ``float64`` numpy arrays. Every public function is pure.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import (
    NoConvergence,
    NonFinite,
    NotPositiveDefinite,
    NotSymmetric,
    RankDeficient,
    ShapeMismatch,
)

SYMMETRY_TOL = 1e-10
JITTER_RETRIES = 3


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return m


def _check_symmetric(a):
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise NotSymmetric(f"asymmetry {asym:.3e} exceeds tolerance")
    return a


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    On failure a diagonal jitter of ``1e-12 * trace(A) / n`` is added and
    escalated tenfold, at most three times.
    """
    a = _check_symmetric(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    n = a.shape[0]
    jitter = 1e-12 * max(float(np.trace(a)), 0.0) / n
    if jitter == 0.0:
        jitter = 1e-12
    for _ in range(JITTER_RETRIES):
        try:
            return np.linalg.cholesky(a + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefinite("Cholesky failed after maximum jitter")


def cholesky_logdet(a):
    """log det(A) for symmetric positive-definite A, as 2 * sum(log diag(L))."""
    L = cholesky(a)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def cho_solve_spd(a, b):
    """Solve ``A X = B`` for symmetric positive-definite ``A``."""
    L = cholesky(a)
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def sym_eigen(a):
    """Eigen-decomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and orthonormal eigenvector columns.
    """
    a = _check_symmetric(a)
    # the symmetrized copy makes LAPACK see exactly the same matrix for A and A^T
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return w[::-1].copy(), v[:, ::-1].copy()


def jacobi_eigen(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigensolver. Slow, but independent of LAPACK.

    Used as a cross-check for :func:`sym_eigen` on small matrices.
    """
    a = _check_symmetric(a).copy()
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * max(norm, 1e-300):
            order = np.argsort(-np.diag(a), kind="stable")
            return np.diag(a)[order].copy(), v[:, order].copy()
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")


def qr_orthonormalize(b):
    """Orthonormal basis for the column span of ``b`` (thin QR).

    Column signs are fixed so that R has a positive diagonal; an input
    that is already orthonormal is returned unchanged up to roundoff.
    """
    b = as_matrix(b)
    rows, cols = b.shape
    if cols > rows:
        raise ShapeMismatch(f"need cols <= rows, got {b.shape}")
    q, r = np.linalg.qr(b)
    d = np.diag(r)
    mags = np.abs(d)
    if cols and (mags.max() == 0.0 or mags.min() < 1e-12 * mags.max()):
        raise RankDeficient("matrix does not have full column rank")
    signs = np.where(d < 0, -1.0, 1.0)
    return q * signs


def rng(seed):
    """A numpy Generator (PCG64) for a non-negative 64-bit seed."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(master, name):
    """Deterministic 64-bit child seed from a master seed and a stream name."""
    h = hashlib.sha256(f"{int(master)}:{name}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def seeded_gaussian(rows, cols, seed):
    """rows x cols matrix of i.i.d. standard normals, deterministic per seed."""
    if rows < 1 or cols < 1:
        raise ShapeMismatch("rows and cols must be >= 1")
    return rng(seed).standard_normal((rows, cols))


def random_orthogonal(n, generator):
    """Haar-distributed n x n orthogonal matrix drawn from ``generator``."""
    g = generator.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)
