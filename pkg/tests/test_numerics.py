import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from koopman_mhe import numerics
from koopman_mhe.numerics import (ConvergenceError, NotPositiveDefiniteError, RankZeroError,
                                  cholesky, eigenvalues, pinv, skew, solve_spd, svd)


def charpoly(m):
    """Faddeev-LeVerrier coefficients of det(lambda I - m), leading 1."""
    n = m.shape[0]
    coeffs = [1.0]
    mk = np.zeros_like(m)
    for k in range(1, n + 1):
        mk = m @ mk + coeffs[-1] * np.eye(n)
        coeffs.append(-np.trace(m @ mk) / k)
    return np.array(coeffs)


def match_multiset(a, b):
    """Largest distance after greedily pairing each element of a with one of b."""
    b = list(b)
    worst = 0.0
    for z in a:
        j = int(np.argmin([abs(z - w) for w in b]))
        worst = max(worst, abs(z - b.pop(j)))
    return worst


# ---------------------------------------------------------------- svd

def test_svd_identity():
    r = svd(np.eye(3))
    np.testing.assert_allclose(r.s, [1, 1, 1], atol=1e-15)
    np.testing.assert_allclose(np.abs(r.U @ r.V.T), np.eye(3), atol=1e-15)


def test_svd_diagonal_with_zero():
    r = svd(np.diag([3.0, 2.0, 0.0]))
    np.testing.assert_allclose(r.s, [3, 2, 0], atol=1e-15)


def test_svd_matches_gram_charpoly_oracle():
    m = np.random.default_rng(4).standard_normal((4, 3))
    lam = np.sort(np.roots(charpoly(m.T @ m)).real)[::-1]
    np.testing.assert_allclose(svd(m).s, np.sqrt(lam), atol=1e-9)


@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (5, 1), (7, 3), (3, 7), (33, 400), (12, 12)])
def test_svd_shapes_reconstruct_and_orthonormal(shape):
    m = np.random.default_rng(sum(shape)).standard_normal(shape)
    r = svd(m)
    k = min(shape)
    assert r.U.shape == (shape[0], k) and r.V.shape == (shape[1], k)
    assert np.all(np.diff(r.s) <= 0) and np.all(r.s >= 0)
    assert np.linalg.norm(r.reconstruct() - m) <= 1e-10 * max(shape) * r.s[0]
    assert np.linalg.norm(r.U.T @ r.U - np.eye(k)) <= 1e-10
    assert np.linalg.norm(r.V.T @ r.V - np.eye(k)) <= 1e-10


def test_svd_rank_deficient_keeps_orthonormal_basis():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    r = svd(m)
    assert r.s[2] < 1e-12 * r.s[0]
    assert np.linalg.norm(r.U.T @ r.U - np.eye(5)) <= 1e-10
    assert np.linalg.norm(r.V.T @ r.V - np.eye(5)) <= 1e-10


def test_svd_sweep_cap_raises_with_count(monkeypatch):
    monkeypatch.setattr(numerics, "JACOBI_SWEEPS_PER_COL", 0)
    with pytest.raises(ConvergenceError) as info:
        svd(np.random.default_rng(0).standard_normal((4, 3)))
    assert info.value.iterations == 0


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


# ---------------------------------------------------------------- pinv

def test_pinv_identity():
    np.testing.assert_allclose(pinv(np.eye(4), 1e-10), np.eye(4), atol=1e-15)


def test_pinv_rank_deficient_diagonal():
    np.testing.assert_allclose(pinv(np.diag([2.0, 0.0]), 1e-10), np.diag([0.5, 0.0]), atol=1e-15)


def test_pinv_normal_equations_oracle():
    m = np.random.default_rng(7).standard_normal((5, 3))
    oracle = np.linalg.solve(m.T @ m, m.T)
    np.testing.assert_allclose(pinv(m, 0.0), oracle, atol=1e-8)


def test_pinv_rank_zero_and_threshold_range():
    with pytest.raises(RankZeroError):
        pinv(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        pinv(np.eye(2), 1.0)


def test_pinv_threshold_truncates_and_rank_is_monotone():
    m = np.diag([1.0, 1e-3, 1e-6, 1e-9])
    ranks = [pinv(m, thr, return_rank=True)[1] for thr in (0.0, 1e-10, 1e-7, 1e-4, 1e-2)]
    assert ranks == [4, 4, 3, 2, 1]
    assert all(a >= b for a, b in zip(ranks, ranks[1:]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_pinv_moore_penrose_property(m):
    if not np.any(np.abs(m) > 1e-6):
        return
    p = pinv(m, 1e-10)
    scale = max(1.0, np.abs(m).max(), np.abs(p).max()) ** 3
    assert np.abs(m @ p @ m - m).max() <= 1e-8 * scale
    assert np.abs(p @ m @ p - p).max() <= 1e-8 * scale
    assert np.abs((m @ p).T - m @ p).max() <= 1e-8 * scale
    assert np.abs((p @ m).T - p @ m).max() <= 1e-8 * scale


# ---------------------------------------------------------------- eigenvalues

def test_eigenvalues_diagonal():
    ev = eigenvalues(np.diag([1.0, 2.0, 3.0]))
    assert match_multiset(ev, [1, 2, 3]) < 1e-14


def test_eigenvalues_rotation():
    ev = eigenvalues(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    assert match_multiset(ev, [1j, -1j]) < 1e-14


def test_eigenvalues_charpoly_oracle():
    m = np.random.default_rng(11).standard_normal((4, 4))
    assert match_multiset(eigenvalues(m), np.roots(charpoly(m))) < 1e-7


def test_eigenvalues_conjugate_pairs_and_det():
    m = np.random.default_rng(5).standard_normal((7, 7))
    ev = eigenvalues(m)
    assert match_multiset(ev, np.conj(ev)) == 0.0
    det = abs(np.linalg.det(m))
    assert abs(np.prod(np.abs(ev)) - det) <= 1e-8 * det


def test_eigenvalues_iteration_cap(monkeypatch):
    monkeypatch.setattr(numerics, "QR_SHIFTS_PER_DIM", 0)
    with pytest.raises(ConvergenceError):
        eigenvalues(np.random.default_rng(2).standard_normal((5, 5)))


def test_eigenvalues_rejects_bad_shapes():
    with pytest.raises(ValueError):
        eigenvalues(np.ones((2, 3)))
    with pytest.raises(ValueError):
        eigenvalues(np.eye(numerics.MAX_EIG_DIM + 1))


def test_eigenvalues_defective_and_repeated():
    jordan = np.array([[2.0, 1.0, 0.0], [0.0, 2.0, 1.0], [0.0, 0.0, 2.0]])
    assert match_multiset(eigenvalues(jordan), [2, 2, 2]) < 1e-12
    assert match_multiset(eigenvalues(np.eye(9)), [1] * 9) == 0.0


# ---------------------------------------------------------------- cholesky / solve

def test_solve_spd_identity_and_diagonal():
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(solve_spd(np.eye(3), b), b, atol=1e-15)
    np.testing.assert_allclose(solve_spd(np.diag([4.0, 9.0]), np.array([8.0, 27.0])), [2, 3],
                               atol=1e-15)


def test_solve_spd_elimination_oracle():
    rng = np.random.default_rng(9)
    g = rng.standard_normal((6, 6))
    a = g @ g.T + 6 * np.eye(6)
    b = rng.standard_normal((6, 2))
    x = solve_spd(a, b)
    np.testing.assert_allclose(x, np.linalg.solve(a, b), atol=1e-9)
    assert np.linalg.norm(a @ x - b) <= 1e-9 * np.linalg.norm(b) * np.linalg.cond(a)


def test_cholesky_failures():
    with pytest.raises(NotPositiveDefiniteError):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        cholesky(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_cholesky_factor():
    a = np.array([[4.0, 2.0], [2.0, 3.0]])
    L = cholesky(a)
    np.testing.assert_allclose(L @ L.T, a, atol=1e-15)
    assert L[0, 1] == 0.0


# ---------------------------------------------------------------- skew

def test_skew_basics():
    assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    np.testing.assert_array_equal(skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)))
def test_skew_is_cross_product(v, w):
    s = skew(v)
    np.testing.assert_allclose(s @ w, np.cross(v, w), atol=1e-9)
    np.testing.assert_allclose(s @ w, -skew(w) @ v, atol=1e-9)
    assert np.array_equal(s, -s.T)
