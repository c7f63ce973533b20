import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depict.coding_rate import (
    RateConfig,
    coding_rate,
    coding_rate_dual,
    coding_rate_primal,
    is_orthonormal,
    per_basis_rate,
    per_basis_rate_sum,
    projected_coding_rate,
    projected_rate_gradient,
)
from depict.errors import ConfigInvalid, NonFinite, ShapeMismatch
from depict.matcore import qr_orthonormalize, rng
from depict.verify import fd_gradient


def eig_rate(Z, eps):
    D, N = Z.shape
    lam = np.clip(np.linalg.eigvalsh(Z @ Z.T), 0, None)
    return 0.5 * np.sum(np.log1p(D / (N * eps**2) * lam))


def test_zero_and_analytic():
    assert coding_rate(np.zeros((4, 8))) == 0.0
    assert coding_rate(np.zeros((4, 8)), RateConfig(epsilon=3.0)) == 0.0
    assert coding_rate(np.eye(2), RateConfig(epsilon=1.0)) == pytest.approx(np.log(2), abs=1e-12)


def test_eigen_oracle():
    Z = rng(1).standard_normal((8, 16))
    assert abs(coding_rate(Z) - eig_rate(Z, 0.5)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(D=st.integers(1, 64), N=st.integers(1, 64), seed=st.integers(0, 2**32), eps=st.floats(0.1, 2.0))
def test_primal_dual_eigen_agree(D, N, seed, eps):
    cfg = RateConfig(epsilon=eps)
    Z = rng(seed).standard_normal((D, N))
    r = coding_rate(Z, cfg)
    assert r >= 0
    assert abs(r - coding_rate_dual(Z, cfg)) <= 1e-9
    assert abs(r - coding_rate_primal(Z, cfg)) <= 1e-9
    assert abs(r - eig_rate(Z, eps)) <= 1e-9


def test_dual_examples():
    assert coding_rate_dual(np.zeros((3, 5))) == 0.0
    Z = rng(2).standard_normal((2, 5))
    assert abs(coding_rate_dual(Z) - coding_rate(Z)) <= 1e-9
    Z = rng(3).standard_normal((64, 4))
    assert abs(coding_rate_dual(Z) - coding_rate_primal(Z)) <= 1e-9


def test_errors_and_config():
    with pytest.raises(NonFinite):
        coding_rate(np.array([[np.inf]]))
    with pytest.raises(ShapeMismatch):
        coding_rate(np.ones(3))
    with pytest.raises(ConfigInvalid):
        RateConfig(epsilon=0.0)
    with pytest.raises(ShapeMismatch):
        coding_rate(np.ones((3, 4)), RateConfig(ambient_dim=5))
    with pytest.raises(ConfigInvalid):
        RateConfig(ambient_dim=4, proj_dim=5)


def test_projected_examples():
    Z = rng(4).standard_normal((5, 9))
    e1 = np.eye(5)[:, :1]
    r = Z[0]
    assert projected_coding_rate(Z, e1) == pytest.approx(0.5 * np.log1p(r @ r / (9 * 0.25)), abs=1e-12)
    assert abs(projected_coding_rate(Z, np.eye(5)) - coding_rate(Z)) <= 1e-12
    P = qr_orthonormalize(rng(5).standard_normal((5, 3)))
    gram = 0.5 * np.linalg.slogdet(np.eye(9) + 3 / (9 * 0.25) * Z.T @ P @ P.T @ Z)[1]
    assert abs(projected_coding_rate(Z, P) - gram) <= 1e-9


def test_projected_shape_error():
    with pytest.raises(ShapeMismatch):
        projected_coding_rate(np.ones((4, 3)), np.ones((5, 2)))


def test_per_basis_sum():
    Z = rng(6).standard_normal((6, 10))
    P = qr_orthonormalize(rng(7).standard_normal((6, 4)))
    assert per_basis_rate_sum(np.zeros((6, 10)), P) == 0.0
    assert abs(per_basis_rate_sum(Z, P[:, :1]) - projected_coding_rate(Z, P[:, :1])) <= 1e-12
    loop = 0.0
    for c in range(4):
        s = 0.0
        for n in range(10):
            s += float(P[:, c] @ Z[:, n]) ** 2
        loop += 0.5 * np.log(1 + s / (10 * 0.25))
    assert abs(per_basis_rate_sum(Z, P) - loop) <= 1e-12
    assert abs(sum(per_basis_rate(Z, P[:, c]) for c in range(4)) - loop) <= 1e-12


def test_is_orthonormal():
    assert is_orthonormal(np.eye(4)[:, :2])
    assert not is_orthonormal(2 * np.eye(4)[:, :2])


def test_gradient_examples():
    P = qr_orthonormalize(rng(8).standard_normal((5, 2)))
    assert np.array_equal(projected_rate_gradient(np.zeros((5, 7)), P), np.zeros((5, 7)))
    assert np.allclose(projected_rate_gradient(rng(9).standard_normal((5, 7)), np.zeros((5, 2))), 0)


@settings(max_examples=25, deadline=None)
@given(D=st.integers(2, 7), N=st.integers(1, 9), M=st.integers(1, 3), seed=st.integers(0, 2**32))
def test_gradient_finite_differences(D, N, M, seed):
    M = min(M, D)
    g = rng(seed)
    Z = g.standard_normal((D, N))
    P = qr_orthonormalize(g.standard_normal((D, M)))
    fd = fd_gradient(lambda x: projected_coding_rate(x, P), Z)
    an = projected_rate_gradient(Z, P)
    assert np.linalg.norm(fd - an) <= 1e-6 * max(np.linalg.norm(fd), 1e-3)


def test_rate_is_determinstic():
    Z = rng(10).standard_normal((8, 16))
    assert coding_rate(Z) == coding_rate(Z.copy())
