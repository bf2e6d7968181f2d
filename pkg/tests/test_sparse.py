import numpy as np
import pytest
import scipy.sparse as sp

from lgm_split.exceptions import DimensionMismatch, NonPositiveScale, NotPositiveDefinite
from lgm_split.sparse import (
    SparseSpdMatrix,
    block_diag,
    cholesky,
    kron_diag,
    log_det,
    sample_gmrf,
    solve,
)

from _oracles import random_spd


def _rel_fro(A, B):
    return np.linalg.norm(A - B) / np.linalg.norm(B)


def test_identity_factor():
    F = cholesky(SparseSpdMatrix.identity(3))
    assert np.array_equal(F.L.toarray(), np.eye(3))
    assert F.logdet == 0.0


def test_diagonal_logdet():
    F = cholesky(SparseSpdMatrix.identity(3, 2.0))
    assert F.logdet == pytest.approx(3 * np.log(2), abs=1e-14)
    assert log_det(F) == pytest.approx(2.0794415416798357, abs=1e-12)
    assert log_det(cholesky(SparseSpdMatrix.identity(5))) == 0.0


@pytest.mark.parametrize("ordering", ["mindegree", "natural", "rcm"])
def test_factor_reproduces_permuted_matrix(ordering):
    rng = np.random.default_rng(0)
    A = rng.normal(size=(6, 6))
    Q = A.T @ A + np.eye(6)
    F = cholesky(SparseSpdMatrix.from_dense(Q), ordering)
    P = F.P.toarray()
    L = F.L.toarray()
    assert _rel_fro(L @ L.T, P @ Q @ P.T) < 1e-10


def test_round_trip_and_logdet_random(rng):
    for n in (1, 5, 20, 50):
        Q = random_spd(n, rng, density=0.1)
        F = cholesky(SparseSpdMatrix.from_dense(Q))
        P, L = F.P.toarray(), F.L.toarray()
        assert _rel_fro(L @ L.T, P @ Q @ P.T) < 1e-10
        assert F.logdet == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(Q))), abs=1e-9)


def test_not_positive_definite_reports_pivot():
    Q = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefinite) as info:
        cholesky(SparseSpdMatrix.from_dense(Q), "natural")
    assert info.value.pivot == 1
    assert isinstance(info.value, np.linalg.LinAlgError)


def test_solve_examples():
    F = cholesky(SparseSpdMatrix.identity(3))
    assert np.array_equal(solve(F, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    F2 = cholesky(SparseSpdMatrix.identity(2, 2.0))
    assert np.allclose(F2.solve(np.array([2.0, 2.0])), [1.0, 1.0], atol=1e-15)


def test_solve_matches_dense():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(8, 8))
    Q = A @ A.T + 8 * np.eye(8)
    b = rng.normal(size=8)
    x = solve(cholesky(SparseSpdMatrix.from_dense(Q)), b)
    assert np.allclose(x, np.linalg.solve(Q, b), rtol=1e-8, atol=1e-12)
    assert np.linalg.norm(Q @ x - b) / np.linalg.norm(b) < 1e-8
    B = rng.normal(size=(8, 3))
    assert np.allclose(solve(cholesky(SparseSpdMatrix.from_dense(Q)), B), np.linalg.solve(Q, B))


def test_solve_dimension_mismatch():
    F = cholesky(SparseSpdMatrix.identity(3))
    with pytest.raises(DimensionMismatch):
        solve(F, np.ones(4))
    with pytest.raises(DimensionMismatch):
        sample_gmrf(F, np.zeros(2), np.random.default_rng(0))


def test_sample_identity_moments():
    rng = np.random.default_rng(1)
    F = cholesky(SparseSpdMatrix.identity(3))
    X = sample_gmrf(F, np.zeros(3), rng, size=100_000)
    assert np.all(np.abs(X.mean(axis=0)) < 0.02)
    assert np.all(np.abs(np.cov(X.T) - np.eye(3)) < 0.03)


def test_sample_scaled_identity_variance():
    rng = np.random.default_rng(2)
    F = cholesky(SparseSpdMatrix.identity(4, 4.0))
    X = F.sample(np.zeros(4), rng, size=100_000)
    assert np.all(np.abs(X.var(axis=0) - 0.25) < 0.01)


def test_sample_scalar():
    rng = np.random.default_rng(3)
    F = cholesky(SparseSpdMatrix.from_dense(np.array([[1.0]])))
    X = sample_gmrf(F, np.array([5.0]), rng, size=100_000)[:, 0]
    assert abs(X.mean() - 5.0) < 0.02
    assert abs(X.std() - 1.0) < 0.02
    assert sample_gmrf(F, np.array([5.0]), rng).shape == (1,)


def test_sample_empirical_precision():
    rng = np.random.default_rng(4)
    Q = np.array([[2.0, -0.8, 0.0], [-0.8, 2.0, -0.8], [0.0, -0.8, 2.0]])
    F = cholesky(SparseSpdMatrix.from_dense(Q))
    X = F.sample(np.ones(3), rng, size=100_000)
    Qhat = np.linalg.inv(np.cov(X.T))
    nz = Q != 0
    assert np.all(np.abs(Qhat[nz] - Q[nz]) < 0.05 * np.abs(Q[nz]))
    assert np.all(np.abs(Qhat[~nz]) < 0.05)


def test_band_bandwidth_preserved_under_natural_ordering():
    n, w = 30, 2
    Q = sp.diags([np.full(n - 2, 0.5), np.full(n - 1, -1.0), np.full(n, 4.0),
                  np.full(n - 1, -1.0), np.full(n - 2, 0.5)], [-2, -1, 0, 1, 2])
    F = cholesky(SparseSpdMatrix.from_scipy(Q), "natural")
    rows, cols = F.L.nonzero()
    assert np.max(rows - cols) <= w


def test_fill_is_bounded():
    rng = np.random.default_rng(5)
    Q = random_spd(40, rng, density=0.05)
    S = SparseSpdMatrix.from_dense(Q)
    F = cholesky(S)
    assert F.nnz >= S.nnz
    assert F.nnz <= 40 * 41 // 2


def test_storage_invariants():
    Q = SparseSpdMatrix.from_dense(np.array([[2.0, 1.0], [1.0, 3.0]]))
    assert np.array_equal(Q.to_dense(), Q.to_dense().T)
    with pytest.raises(ValueError):
        SparseSpdMatrix(2, [0, 1, 2], [0, 1], [1.0, -1.0])
    with pytest.raises(ValueError):
        SparseSpdMatrix(2, [0, 2, 3], [1, 0, 1], [1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        SparseSpdMatrix.from_dense(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_with_data_keeps_pattern():
    Q = SparseSpdMatrix.from_dense(np.array([[2.0, 1.0], [1.0, 3.0]]))
    R = Q.with_data(2 * Q.data)
    assert R.pattern_key() == Q.pattern_key()
    assert np.array_equal(R.to_dense(), 2 * Q.to_dense())
    assert np.allclose(Q @ np.array([1.0, 1.0]), [3.0, 4.0])


def test_block_diag_example():
    B = block_diag([SparseSpdMatrix.identity(2), SparseSpdMatrix.identity(1, 3.0)])
    assert np.array_equal(B.to_dense(), np.diag([1.0, 1.0, 3.0]))
    with pytest.raises(ValueError):
        block_diag([])


def test_kron_diag():
    K = kron_diag([2.0], SparseSpdMatrix.identity(2))
    assert np.array_equal(K.to_dense(), 2 * np.eye(2))
    rng = np.random.default_rng(6)
    A = rng.normal(size=(3, 3))
    B = A @ A.T + np.eye(3)
    K = kron_diag([1.0, 2.0], SparseSpdMatrix.from_dense(B))
    assert np.array_equal(K.to_dense(), np.kron(np.diag([1.0, 2.0]), B))
    with pytest.raises(NonPositiveScale):
        kron_diag([1.0, 0.0], SparseSpdMatrix.from_dense(B))
