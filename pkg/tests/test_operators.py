import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depict.coding_rate import RateConfig, coding_rate, projected_coding_rate, projected_rate_gradient
from depict.errors import ConfigInvalid, ResourceCap, ShapeMismatch
from depict.matcore import qr_orthonormalize, random_orthogonal, rng
from depict.operators import (
    LayerNormParams,
    SubspaceDictionary,
    ca_step,
    concat_sa_decompose,
    layer_norm,
    msca,
    msca_step,
    mssa,
    mssa_per_basis,
    mssa_step,
    mssa_update,
    qbar_sa_step,
    recombine_terms,
    sca_head,
    softmax_columns,
    ssa_head,
)

CFG = RateConfig()


def heads_dict(D, H, M, seed):
    g = rng(seed)
    return SubspaceDictionary(np.hstack([qr_orthonormalize(g.standard_normal((D, M))) for _ in range(H)]), H)


def loop_softmax(X):
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        e = [np.exp(x - max(X[:, j])) for x in X[:, j]]
        s = sum(e)
        out[:, j] = [v / s for v in e]
    return out


def test_softmax_columns():
    X = rng(0).standard_normal((5, 4)) * 10
    S = softmax_columns(X)
    assert np.allclose(S.sum(axis=0), 1.0, atol=1e-12)
    assert np.allclose(S, loop_softmax(X), atol=1e-15)
    big = softmax_columns(np.array([[1000.0], [0.0]]))
    assert np.all(np.isfinite(big)) and big[0, 0] == 1.0


def test_layer_norm_columns():
    Z = rng(1).standard_normal((6, 4)) * 3 + 2
    out = layer_norm(Z, LayerNormParams.identity(6))
    assert np.allclose(out.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(out.var(axis=0), 1, atol=1e-4)
    with pytest.raises(ConfigInvalid):
        LayerNormParams(np.ones(2), np.zeros(2), 0.0)


def test_subspace_dictionary():
    P = heads_dict(8, 2, 3, 0)
    assert P.head_dim == 3 and P.dim == 8 and len(P.blocks()) == 2
    with pytest.raises(ShapeMismatch):
        SubspaceDictionary(np.ones((4, 5)), 2)


def test_ssa_head_oracle():
    g = rng(2)
    Z = g.standard_normal((6, 7))
    Ph = qr_orthonormalize(g.standard_normal((6, 2)))
    X = Ph.T @ Z
    ref = np.zeros((2, 7))
    for j in range(7):
        w = np.exp(X.T @ X[:, j] - np.max(X.T @ X[:, j]))
        w /= w.sum()
        for i in range(7):
            ref[:, j] += w[i] * X[:, i]
    assert np.allclose(ssa_head(Z, Ph), ref, atol=1e-12)


def test_mssa_single_head_and_accumulation():
    g = rng(3)
    Z = g.standard_normal((8, 10))
    P = heads_dict(8, 1, 4, 4)
    a = 4 / (10 * 0.25)
    assert np.allclose(mssa(Z, P, CFG), a * P.full @ ssa_head(Z, P.full), atol=1e-12)
    P3 = heads_dict(8, 3, 2, 5)
    acc = sum(Ph @ ssa_head(Z, Ph) for Ph in P3.blocks())
    assert np.allclose(mssa(Z, P3, CFG, form="simplified"), acc, atol=1e-12)
    assert np.allclose(mssa(Z, P3, CFG), (2 / 2.5) * acc, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), H=st.integers(1, 3), M=st.integers(1, 3))
def test_gauge_invariance_mssa_msca(seed, H, M):
    g = rng(seed)
    D = 8
    Z = g.standard_normal((D, 12))
    Q = g.standard_normal((D, 3))
    P = heads_dict(D, H, M, seed + 1)
    rotated = SubspaceDictionary(np.hstack([B @ random_orthogonal(M, g) for B in P.blocks()]), H)
    for form in ("full", "simplified"):
        assert np.max(np.abs(mssa(Z, P, CFG, form) - mssa(Z, rotated, CFG, form))) <= 1e-10
        assert np.max(np.abs(msca(Q, Z, P, CFG, form) - msca(Q, Z, rotated, CFG, form))) <= 1e-10


def test_mssa_per_basis():
    g = rng(6)
    Z = g.standard_normal((6, 16))
    P = qr_orthonormalize(g.standard_normal((6, 4)))
    grouped = mssa(Z, SubspaceDictionary(P, 4), CFG)
    assert np.allclose(mssa_per_basis(Z, P, CFG), grouped, atol=1e-12)
    p = P[:, :1]
    assert np.allclose(mssa_per_basis(Z, p, CFG), mssa(Z, SubspaceDictionary(p, 1), CFG), atol=1e-12)
    assert np.array_equal(mssa_per_basis(np.zeros((6, 16)), P, CFG), np.zeros((6, 16)))
    with pytest.raises(ResourceCap):
        mssa_per_basis(Z, P, CFG, cap=100)


def test_mssa_step_trivial():
    g = rng(7)
    Z = g.standard_normal((6, 9))
    P = heads_dict(6, 2, 2, 8)
    for form in ("full", "simplified"):
        assert np.array_equal(mssa_step(Z, P, 0.0, CFG, form), Z)
        assert np.array_equal(mssa_step(np.zeros((6, 9)), P, 0.3, CFG, form), np.zeros((6, 9)))


def test_exact_kernel_step_is_gradient_ascent():
    g = rng(9)
    D, N, M = 8, 12, 3
    P = heads_dict(D, 1, M, 10)
    Z = P.full @ g.standard_normal((M, N))  # Z inside span(P)
    alpha = 0.05
    upd = mssa_update(Z, P, alpha, CFG, form="full", kernel="exact")
    grad = projected_rate_gradient(Z, P.full, CFG)
    assert np.allclose(upd, alpha * grad, atol=1e-12)
    after = projected_coding_rate(Z + upd, P.full, CFG)
    assert after > projected_coding_rate(Z, P.full, CFG)


def test_softmax_step_cosine_reported():
    g = rng(11)
    P = heads_dict(8, 1, 3, 12)
    Z = P.full @ g.standard_normal((3, 12))
    upd = mssa_update(Z, P, 1.0, CFG, form="full")
    grad = projected_rate_gradient(Z, P.full, CFG)
    cos = np.sum(upd * grad) / (np.linalg.norm(upd) * np.linalg.norm(grad))
    assert -1.0 <= cos <= 1.0


def test_simplified_step_rate_sign_follows_alpha():
    g = rng(13)
    P = heads_dict(8, 1, 3, 14)
    Z = g.standard_normal((8, 16))
    r0 = projected_coding_rate(Z, P.full, CFG)
    up = projected_coding_rate(mssa_step(Z, P, -0.01, CFG), P.full, CFG)
    down = projected_coding_rate(mssa_step(Z, P, 0.01, CFG), P.full, CFG)
    assert up > r0 > down


def test_sca_head_examples():
    g = rng(15)
    z = g.standard_normal((5, 1))
    Ph = qr_orthonormalize(g.standard_normal((5, 2)))
    Q = g.standard_normal((5, 3))
    out = sca_head(Q, z, Ph)
    assert np.allclose(out, np.tile(Ph.T @ z, (1, 3)), atol=1e-15)
    Z = g.standard_normal((5, 6))
    assert np.allclose(sca_head(Z, Z, Ph), ssa_head(Z, Ph), atol=1e-15)
    X, Y = Ph.T @ Z, Ph.T @ Q
    assert np.allclose(sca_head(Q, Z, Ph), X @ loop_softmax(X.T @ Y), atol=1e-12)


def test_msca_range_and_trivial():
    g = rng(16)
    Z = g.standard_normal((10, 12))
    Q = g.standard_normal((10, 4))
    P = heads_dict(10, 2, 2, 17)
    out = msca(Q, Z, P, CFG)
    Pq = qr_orthonormalize(P.full)
    assert np.max(np.abs(out - Pq @ (Pq.T @ out))) <= 1e-10
    for form in ("full", "simplified"):
        assert np.array_equal(msca_step(Q, Z, P, 0.0, CFG, form), Q)
    with pytest.raises(ShapeMismatch):
        msca(np.ones((9, 2)), Z, P, CFG)


def test_qbar_sa_step():
    g = rng(18)
    Qb = g.standard_normal((6, 10))
    assert np.array_equal(qbar_sa_step(Qb, 0.0), Qb)
    assert np.array_equal(qbar_sa_step(np.zeros((6, 10)), 0.2), np.zeros((6, 10)))
    r0 = coding_rate(Qb)
    assert coding_rate(qbar_sa_step(Qb, 1e-3, kernel="exact")) > r0
    a = 6 / (10 * 0.25)
    ref = (1 + 0.1 * a) * Qb - 0.1 * a * a * Qb @ loop_softmax(Qb.T @ Qb)
    assert np.allclose(qbar_sa_step(Qb, 0.1), ref, atol=1e-12)


def test_ca_step():
    g = rng(19)
    Z = g.standard_normal((6, 8))
    Q = g.standard_normal((6, 3))
    assert np.array_equal(ca_step(Q, Z, 0.0), Q)
    assert np.allclose(ca_step(Z, Z, 0.07), qbar_sa_step(Z, 0.07), atol=1e-15)
    a = 6 / (8 * 0.25)
    ref = (1 + 0.2 * a) * Q - 0.2 * a * a * Z @ loop_softmax(Z.T @ Q)
    assert np.allclose(ca_step(Q, Z, 0.2), ref, atol=1e-12)


def test_concat_decomposition():
    g = rng(20)
    Z = g.standard_normal((8, 12))
    Q = g.standard_normal((8, 5))
    dec = concat_sa_decompose(Z, Q, 0.01)
    z, q = recombine_terms(Z, Q, 0.01, dec.terms)
    assert np.max(np.abs(z - dec.z_next)) <= 1e-12
    assert np.max(np.abs(q - dec.q_next)) <= 1e-12
    dec0 = concat_sa_decompose(Z, np.zeros((8, 5)), 0.01)
    assert np.allclose(dec0.z_next, Z - 0.01 * Z @ Z.T @ Z, atol=1e-12)
    assert np.array_equal(dec0.q_next, np.zeros((8, 5)))
    dec1 = concat_sa_decompose(Z, Q, 0.0)
    assert np.array_equal(dec1.z_next, Z) and np.array_equal(dec1.q_next, Q)


def test_form_validation():
    with pytest.raises(ConfigInvalid):
        mssa(np.ones((2, 2)), np.eye(2), CFG, form="half")
    with pytest.raises(ConfigInvalid):
        mssa(np.ones((2, 2)), np.eye(2), CFG, kernel="linear")
