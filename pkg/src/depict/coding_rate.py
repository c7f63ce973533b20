"""Rate-distortion functionals.

``R(Z) = 1/2 logdet(I + D/(N eps^2) Z Z^T)`` and its variants: the Gram-side
form, the rate of a projection onto a head block, per-basis rate sums and
the exact gradient of the projected rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigInvalid, ShapeMismatch
from .matcore import as_matrix, cho_solve_spd, cholesky_logdet

DEFAULT_EPSILON = 0.5
ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class RateConfig:
    """Distortion and (optionally pinned) dimensions for rate formulas.

    ``ambient_dim`` and ``sample_count`` are inferred from the matrix when
    left as ``None``; when set they must agree with it.
    """

    epsilon: float = DEFAULT_EPSILON
    ambient_dim: Optional[int] = None
    sample_count: Optional[int] = None
    proj_dim: Optional[int] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigInvalid(f"epsilon must be > 0, got {self.epsilon}")
        for field in ("ambient_dim", "sample_count"):
            v = getattr(self, field)
            if v is not None and v < 1:
                raise ConfigInvalid(f"{field} must be >= 1")
        if self.proj_dim is not None:
            if self.proj_dim < 1 or (
                self.ambient_dim is not None and self.proj_dim > self.ambient_dim
            ):
                raise ConfigInvalid("proj_dim must satisfy 1 <= M <= D")

    def dims(self, Z):
        """(D, N) of ``Z``, validated against the pinned dimensions."""
        D, N = Z.shape
        if self.ambient_dim is not None and self.ambient_dim != D:
            raise ShapeMismatch(f"config expects D={self.ambient_dim}, got {D}")
        if self.sample_count is not None and self.sample_count != N:
            raise ShapeMismatch(f"config expects N={self.sample_count}, got {N}")
        return D, N

    def scale(self, dim, n):
        """The constant ``dim / (n eps^2)``."""
        return dim / (n * self.epsilon**2)


_DEFAULT = RateConfig()


def logdet_gram(X, scale):
    """1/2 logdet(I + scale X X^T), evaluated on the smaller Gram side."""
    r, c = X.shape
    if r <= c:
        G = X @ X.T
    else:
        G = X.T @ X
    if scale == 0.0 or not np.any(G):
        return 0.0
    n = G.shape[0]
    return 0.5 * cholesky_logdet(np.eye(n) + scale * G)


def coding_rate(Z, cfg=None):
    """R(Z) = 1/2 logdet(I_D + D/(N eps^2) Z Z^T)."""
    cfg = cfg or _DEFAULT
    Z = as_matrix(Z, "Z")
    D, N = cfg.dims(Z)
    return logdet_gram(Z, cfg.scale(D, N))


def coding_rate_primal(Z, cfg=None):
    """R(Z) evaluated strictly on the D x D side."""
    cfg = cfg or _DEFAULT
    Z = as_matrix(Z, "Z")
    D, N = cfg.dims(Z)
    return 0.5 * cholesky_logdet(np.eye(D) + cfg.scale(D, N) * (Z @ Z.T))


def coding_rate_dual(Z, cfg=None):
    """R(Z) evaluated on the N x N side: 1/2 logdet(I_N + D/(N eps^2) Z^T Z)."""
    cfg = cfg or _DEFAULT
    Z = as_matrix(Z, "Z")
    D, N = cfg.dims(Z)
    return 0.5 * cholesky_logdet(np.eye(N) + cfg.scale(D, N) * (Z.T @ Z))


def _check_block(Z, Pp):
    Z = as_matrix(Z, "Z")
    Pp = as_matrix(Pp, "head block")
    if Pp.shape[0] != Z.shape[0]:
        raise ShapeMismatch(f"head block has {Pp.shape[0]} rows, Z has {Z.shape[0]}")
    return Z, Pp


def is_orthonormal(Pp, tol=ORTHONORMAL_TOL):
    """True when ``max|Pp^T Pp - I| <= tol``."""
    Pp = np.asarray(Pp, dtype=np.float64)
    return bool(np.max(np.abs(Pp.T @ Pp - np.eye(Pp.shape[1]))) <= tol)


def projected_coding_rate(Z, Pp, cfg=None):
    """R(Pp^T Z) = 1/2 logdet(I_M + M/(N eps^2) (Pp^T Z)(Pp^T Z)^T).

    Defined for any ``Pp``; see :func:`is_orthonormal` for the regime flag.
    """
    cfg = cfg or _DEFAULT
    Z, Pp = _check_block(Z, Pp)
    _, N = cfg.dims(Z)
    M = Pp.shape[1]
    return logdet_gram(Pp.T @ Z, cfg.scale(M, N))


def per_basis_rate(Z, p, cfg=None):
    """Rate of the projection onto a single direction ``p``."""
    cfg = cfg or _DEFAULT
    Z = as_matrix(Z, "Z")
    _, N = cfg.dims(Z)
    r = np.asarray(p, dtype=np.float64).ravel() @ Z
    return 0.5 * float(np.log1p(cfg.scale(1, N) * float(r @ r)))


def per_basis_rate_sum(Z, Pp, cfg=None):
    """Sum over columns p_c of 1/2 log(1 + p_c^T Z Z^T p_c / (N eps^2))."""
    cfg = cfg or _DEFAULT
    Z, Pp = _check_block(Z, Pp)
    _, N = cfg.dims(Z)
    energies = np.sum((Pp.T @ Z) ** 2, axis=1)
    return 0.5 * float(np.sum(np.log1p(cfg.scale(1, N) * energies)))


def projected_rate_gradient(Z, Pp, cfg=None):
    """Gradient of :func:`projected_coding_rate` with respect to ``Z``.

    ``a Pp Pp^T Z (I_N + a Z^T Pp Pp^T Z)^{-1}`` with ``a = M/(N eps^2)``.
    """
    cfg = cfg or _DEFAULT
    Z, Pp = _check_block(Z, Pp)
    _, N = cfg.dims(Z)
    a = cfg.scale(Pp.shape[1], N)
    X = Pp.T @ Z
    S = np.eye(N) + a * (X.T @ X)
    PX = a * (Pp @ X)
    # PX S^{-1} = (S^{-1} PX^T)^T since S is symmetric
    return cho_solve_spd(S, PX.T).T
