"""Attention operators obtained by unrolling gradient steps on coding-rate
objectives.

Every operator exists in two scalings:

* ``"full"`` keeps the ``M/(N eps^2)`` constants and the ``(1 + alpha a) Z``
  skip term of the derived update;
* ``"simplified"`` drops them (``Z - alpha * MSSA(Z)``), which is what the
  decoder uses because LayerNorm in front of every operator absorbs scale.

The ``kernel`` switch replaces ``softmax(X^T X)`` by the exact term
``(I + a X^T X)^{-1} X^T X`` so that the full-form step becomes an exact
gradient-ascent step on the projected coding rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .coding_rate import RateConfig
from .errors import ConfigInvalid, ResourceCap, ShapeMismatch
from .matcore import as_matrix, cho_solve_spd

FORMS = ("full", "simplified")
KERNELS = ("softmax", "exact")
PER_BASIS_CAP = 50_000_000  # C * N^2 entries

_DEFAULT = RateConfig()


@dataclass
class SubspaceDictionary:
    """D x K parameter matrix split into ``heads`` blocks of ``K / heads`` columns."""

    full: np.ndarray
    heads: int = 1

    def __post_init__(self):
        self.full = as_matrix(self.full, "P")
        if self.heads < 1 or self.full.shape[1] % self.heads:
            raise ShapeMismatch(
                f"K={self.full.shape[1]} is not divisible into {self.heads} heads"
            )

    @property
    def head_dim(self):
        return self.full.shape[1] // self.heads

    @property
    def dim(self):
        return self.full.shape[0]

    def block(self, h):
        m = self.head_dim
        return self.full[:, h * m : (h + 1) * m]

    def blocks(self):
        return [self.block(h) for h in range(self.heads)]


@dataclass
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray
    eps_ln: float = 1e-5

    def __post_init__(self):
        if not self.eps_ln > 0:
            raise ConfigInvalid("eps_ln must be > 0")

    @classmethod
    def identity(cls, D, eps_ln=1e-5):
        return cls(np.ones(D), np.zeros(D), eps_ln)


def _check_form(form, kernel="softmax"):
    if form not in FORMS:
        raise ConfigInvalid(f"form must be one of {FORMS}, got {form!r}")
    if kernel not in KERNELS:
        raise ConfigInvalid(f"kernel must be one of {KERNELS}, got {kernel!r}")


def softmax_columns(X):
    """Column-wise softmax with max subtraction."""
    X = np.asarray(X, dtype=np.float64)
    E = np.exp(X - X.max(axis=-2, keepdims=True))
    return E / E.sum(axis=-2, keepdims=True)


def layer_norm(Z, p):
    """Normalize every column over the feature axis, then apply gain and bias."""
    Z = np.asarray(Z, dtype=np.float64)
    mu = Z.mean(axis=-2, keepdims=True)
    var = ((Z - mu) ** 2).mean(axis=-2, keepdims=True)
    Zn = (Z - mu) / np.sqrt(var + p.eps_ln)
    return p.gain[:, None] * Zn + p.bias[:, None]


def _head_kernel(X, Y, kernel, scale):
    """Attention matrix for keys X (M x N) and queries Y (M x Q)."""
    if kernel == "softmax":
        return softmax_columns(X.T @ Y)
    S = np.eye(X.shape[1]) + scale * (X.T @ X)
    return cho_solve_spd(S, X.T @ Y)


def _check_pair(Z, Ph):
    Z = as_matrix(Z, "Z")
    Ph = as_matrix(Ph, "head block")
    if Ph.shape[0] != Z.shape[0]:
        raise ShapeMismatch(f"head block has {Ph.shape[0]} rows, Z has {Z.shape[0]}")
    return Z, Ph


def ssa_head(Z, Ph, kernel="softmax", scale=0.0):
    """(Ph^T Z) softmax((Ph^T Z)^T (Ph^T Z)): an M x N matrix."""
    Z, Ph = _check_pair(Z, Ph)
    X = Ph.T @ Z
    return X @ _head_kernel(X, X, kernel, scale)


def _as_dict(P):
    if isinstance(P, SubspaceDictionary):
        return P
    return SubspaceDictionary(P, 1)


def mssa(Z, P, cfg=None, form="full", kernel="softmax"):
    """Grouped multi-head subspace self-attention, a D x N matrix.

    ``full``: ``M/(N eps^2) * sum_h P_h SSA(Z | P_h)``; ``simplified`` omits
    the leading constant.
    """
    _check_form(form, kernel)
    cfg = cfg or _DEFAULT
    P = _as_dict(P)
    Z = as_matrix(Z, "Z")
    if P.dim != Z.shape[0]:
        raise ShapeMismatch(f"P has {P.dim} rows, Z has {Z.shape[0]}")
    _, N = cfg.dims(Z)
    a = cfg.scale(P.head_dim, N)
    out = np.zeros_like(Z)
    for Ph in P.blocks():  # fixed head order keeps the sum bit-stable
        out += Ph @ ssa_head(Z, Ph, kernel, a)
    return a * out if form == "full" else out


def mssa_per_basis(Z, P, cfg=None, cap=PER_BASIS_CAP):
    """One head per basis vector: ``1/(N eps^2) * sum_c p_c SSA(Z | p_c)``.

    Memory grows as C * N^2, so this is only a small-scale reference.
    """
    cfg = cfg or _DEFAULT
    Z = as_matrix(Z, "Z")
    P = as_matrix(P.full if isinstance(P, SubspaceDictionary) else P, "P")
    if P.shape[0] != Z.shape[0]:
        raise ShapeMismatch(f"P has {P.shape[0]} rows, Z has {Z.shape[0]}")
    _, N = cfg.dims(Z)
    C = P.shape[1]
    if C * N * N > cap:
        raise ResourceCap(f"C*N^2 = {C * N * N} exceeds cap {cap}")
    out = np.zeros_like(Z)
    for c in range(C):
        p = P[:, [c]]
        out += p @ ssa_head(Z, p)
    return cfg.scale(1, N) * out


def mssa_update(Z, P, alpha, cfg=None, form="simplified", kernel="softmax"):
    """Increment of one MSSA layer, so that ``mssa_step = Z + mssa_update``.

    ``full``: ``alpha a Z - alpha a MSSA(Z)`` with ``a = M/(N eps^2)``.
    ``simplified``: ``-alpha MSSA(Z)``.
    """
    _check_form(form, kernel)
    cfg = cfg or _DEFAULT
    P = _as_dict(P)
    Z = as_matrix(Z, "Z")
    attn = mssa(Z, P, cfg, form, kernel)
    if form == "simplified":
        return -alpha * attn
    _, N = cfg.dims(Z)
    a = cfg.scale(P.head_dim, N)
    return alpha * a * (Z - attn)


def mssa_step(Z, P, alpha, cfg=None, form="simplified", kernel="softmax"):
    """One MSSA layer: ``(1 + alpha a) Z - alpha a MSSA(Z)`` (full) or
    ``Z - alpha MSSA(Z)`` (simplified)."""
    Z = as_matrix(Z, "Z")
    return Z + mssa_update(Z, P, alpha, cfg, form, kernel)


def sca_head(Q, Z, Ph):
    """(Ph^T Z) softmax((Ph^T Z)^T (Ph^T Q)): an M x C matrix.

    The softmax runs over the N keys for each query.
    """
    Z, Ph = _check_pair(Z, Ph)
    Q = as_matrix(Q, "Q")
    if Q.shape[0] != Z.shape[0]:
        raise ShapeMismatch(f"Q has {Q.shape[0]} rows, Z has {Z.shape[0]}")
    X = Ph.T @ Z
    return X @ softmax_columns(X.T @ (Ph.T @ Q))


def msca(Q, Z, P, cfg=None, form="full"):
    """Multi-head subspace cross-attention, a D x C matrix in span(P)."""
    _check_form(form)
    cfg = cfg or _DEFAULT
    P = _as_dict(P)
    Z = as_matrix(Z, "Z")
    _, N = cfg.dims(Z)
    a = cfg.scale(P.head_dim, N)
    out = np.zeros(np.shape(Q), dtype=np.float64)
    for Ph in P.blocks():
        out += Ph @ sca_head(Q, Z, Ph)
    return a * out if form == "full" else out


def msca_update(Q, Z, P, alpha, cfg=None, form="simplified"):
    """Increment of one MSCA layer on the class embeddings."""
    _check_form(form)
    cfg = cfg or _DEFAULT
    P = _as_dict(P)
    Q = as_matrix(Q, "Q")
    attn = msca(Q, Z, P, cfg, form)
    if form == "simplified":
        return -alpha * attn
    _, N = cfg.dims(as_matrix(Z, "Z"))
    a = cfg.scale(P.head_dim, N)
    return alpha * a * (Q - attn)


def msca_step(Q, Z, P, alpha, cfg=None, form="simplified"):
    """One MSCA layer: ``(1 + alpha a) Q - alpha a MSCA(Q | Z, P)`` (full) or
    ``Q - alpha MSCA(Q | Z, P)`` (simplified)."""
    Q = as_matrix(Q, "Q")
    return Q + msca_update(Q, Z, P, alpha, cfg, form)


def qbar_sa_step(Qbar, alpha, cfg=None, kernel="softmax"):
    """``(1 + alpha a) Qbar - alpha a^2 Qbar softmax(Qbar^T Qbar)``, ``a = D/(N eps^2)``.

    With ``kernel="exact"`` this is exact gradient ascent on R(Qbar).
    """
    _check_form("full", kernel)
    cfg = cfg or _DEFAULT
    Qbar = as_matrix(Qbar, "Qbar")
    D, N = cfg.dims(Qbar)
    a = cfg.scale(D, N)
    return (1.0 + alpha * a) * Qbar - alpha * a * a * (
        Qbar @ _head_kernel(Qbar, Qbar, kernel, a)
    )


def ca_step(Q, Z, alpha, cfg=None):
    """``(1 + alpha a) Q - alpha a^2 Z softmax(Z^T Q)``, ``a = D/(N eps^2)``, N from Z."""
    cfg = cfg or _DEFAULT
    Q = as_matrix(Q, "Q")
    Z = as_matrix(Z, "Z")
    if Q.shape[0] != Z.shape[0]:
        raise ShapeMismatch(f"Q has {Q.shape[0]} rows, Z has {Z.shape[0]}")
    D, N = cfg.dims(Z)
    a = cfg.scale(D, N)
    return (1.0 + alpha * a) * Q - alpha * a * a * (Z @ softmax_columns(Z.T @ Q))


class ConcatDecomposition(NamedTuple):
    z_next: np.ndarray
    q_next: np.ndarray
    terms: dict


def concat_sa_decompose(Z, Q, alpha):
    """Softmax-free self-attention on ``[Z, Q]`` and its four product terms.

    ``z_next``/``q_next`` come from the concatenated update
    ``[Z, Q] - alpha [Z, Q][Z, Q]^T [Z, Q]``; ``terms`` holds ``ZZ^TZ``,
    ``QQ^TZ``, ``ZZ^TQ`` and ``QQ^TQ``. Recombine them with
    :func:`recombine_terms`.
    """
    Z = as_matrix(Z, "Z")
    Q = np.asarray(Q, dtype=np.float64).reshape(Z.shape[0], -1)
    N = Z.shape[1]
    Zb = np.hstack([Z, Q])
    nxt = Zb - alpha * (Zb @ (Zb.T @ Zb))
    terms = {
        "zzz": Z @ (Z.T @ Z),
        "qqz": Q @ (Q.T @ Z),
        "zzq": Z @ (Z.T @ Q),
        "qqq": Q @ (Q.T @ Q),
    }
    return ConcatDecomposition(nxt[:, :N], nxt[:, N:], terms)


def recombine_terms(Z, Q, alpha, terms):
    """Z and Q updates rebuilt from the four terms."""
    z = Z - alpha * (terms["zzz"] + terms["qqz"])
    q = Q - alpha * (terms["zzq"] + terms["qqq"])
    return z, q
