import numpy as np
import pytest
import scipy.sparse as sp

from lgm_split.exceptions import BadDimension, TooLargeForDense
from lgm_split.gmrf import (
    LatentStructure,
    LinearPatternBuilder,
    MaternLatticeBuilder,
    circular_band_precision,
    conditional_nu_given_eta,
    joint_prior_dense,
    lattice_laplacian,
    lattice_matern_precision,
)
from lgm_split.sparse import SparseSpdMatrix, cholesky

from _oracles import dense_conditional_nu, random_structure


def _fixed(Qe_diag, Qn):
    return (lambda th: np.asarray(Qe_diag, dtype=float),
            lambda th: SparseSpdMatrix.from_dense(np.asarray(Qn, dtype=float)))


def test_circular_band_kappa_one():
    Q = circular_band_precision(1.0, 12).to_dense()
    assert np.all(np.diag(Q) == 11.0)
    assert np.all(np.diag(Q, 1) == -6.0)
    assert np.all(np.diag(Q, 2) == 1.0)
    assert Q[0, 11] == -6.0 and Q[0, 10] == 1.0
    assert np.all(Q.sum(axis=1) == 1.0)


def test_circular_band_is_square_of_circular_operator():
    for kappa in (0.5, 1.0, 2.0):
        n = 12
        D = 2 * np.eye(n) - np.roll(np.eye(n), 1, axis=1) - np.roll(np.eye(n), -1, axis=1)
        K = kappa ** 2 * np.eye(n) + D
        assert np.array_equal(circular_band_precision(kappa, n).to_dense(), K.T @ K)


def test_circular_band_pd_and_size():
    assert np.all(np.linalg.eigvalsh(circular_band_precision(2.0, 12).to_dense()) > 0)
    with pytest.raises(BadDimension):
        circular_band_precision(1.0, 4)


def test_lattice_matern_small_matches_product():
    G = lattice_laplacian(2, 2).toarray()
    K = np.eye(4) + G
    assert np.array_equal(lattice_matern_precision(2, 2, 1.0).to_dense(), K.T @ K)
    assert np.allclose(G, [[2, -1, -1, 0], [-1, 2, 0, -1], [-1, 0, 2, -1], [0, -1, -1, 2]])


def test_lattice_matern_large_kappa_and_pd():
    kappa = 1e4
    Q = lattice_matern_precision(3, 4, kappa).to_dense() / kappa ** 4
    assert np.allclose(Q, np.eye(12), atol=1e-6)
    cholesky(lattice_matern_precision(10, 10, 0.5))
    with pytest.raises(BadDimension):
        lattice_matern_precision(1, 3, 1.0)


def test_matern_builder_matches_direct():
    b = MaternLatticeBuilder(4, 5)
    for kappa, sigma in ((0.3, 1.0), (2.0, 0.5)):
        Q = b(kappa, sigma).to_dense()
        ref = lattice_matern_precision(4, 5, kappa).to_dense() / (4 * np.pi * sigma ** 2 * kappa ** 2)
        assert np.allclose(Q, ref, rtol=1e-13, atol=1e-13)
    assert b(1.0, 1.0).pattern_key() == b(3.0, 2.0).pattern_key()


def test_linear_pattern_builder():
    T1 = sp.eye(3)
    T2 = sp.csc_matrix(np.array([[0, 1.0, 0], [1.0, 0, 0], [0, 0, 0]]))
    b = LinearPatternBuilder([T1, T2])
    Q = b(np.array([2.0, 0.5]))
    assert np.array_equal(Q.to_dense(), 2 * np.eye(3) + 0.5 * T2.toarray())


def test_conditional_simple_case():
    qe, qn = _fixed([1.0, 1.0], np.eye(2))
    s = LatentStructure(sp.eye(2), qe, qn)
    c = conditional_nu_given_eta(s, None, np.array([2.0, 2.0]))
    assert np.allclose(c.mean, [1.0, 1.0], atol=1e-15)
    assert np.allclose(c.precision.to_dense(), 2 * np.eye(2))


def test_conditional_no_data_limit():
    rng = np.random.default_rng(1)
    Qn = np.array([[2.0, 0.5], [0.5, 1.0]])
    qe, qn = _fixed(np.full(3, 1e-12), Qn)
    mu = np.array([0.3, -1.0])
    s = LatentStructure(sp.csr_matrix(rng.normal(size=(3, 2))), qe, qn, mu)
    c = conditional_nu_given_eta(s, None, rng.normal(size=3))
    assert np.allclose(c.mean, mu, atol=1e-10)
    assert np.allclose(c.precision.to_dense(), Qn, atol=1e-10)


def test_conditional_matches_dense_conditioning(rng):
    s = random_structure(rng, 4, 3)
    theta = np.array([0.2, -0.3])
    eta = rng.normal(size=4)
    c = conditional_nu_given_eta(s, theta, eta)
    mean, cov = dense_conditional_nu(s, theta, eta)
    assert np.allclose(c.mean, mean, rtol=1e-10, atol=1e-12)
    assert np.allclose(c.precision.to_dense(), np.linalg.inv(cov), rtol=1e-10, atol=1e-10)


def test_conditional_sparsity_bound(rng):
    s = random_structure(rng, 10, 8)
    theta = np.zeros(2)
    Qc = s.conditional_precision(s.q_eps(theta), s.q_nu(theta))
    ztz = (abs(s.Z).T @ abs(s.Z)).toarray() != 0
    qn = s.q_nu(theta).to_dense() != 0
    assert Qc.nnz <= np.count_nonzero(np.tril(ztz | qn))


def test_joint_prior_decoupled_and_scalar():
    qe, qn = _fixed([3.0, 4.0], np.diag([1.0, 2.0]))
    s = LatentStructure(sp.csr_matrix((2, 2)), qe, qn)
    _, P = joint_prior_dense(s, None)
    assert np.array_equal(P, np.diag([3.0, 4.0, 1.0, 2.0]))
    a, b = 2.5, 0.7
    qe, qn = _fixed([a], [[b]])
    s = LatentStructure(sp.csr_matrix(np.array([[1.0]])), qe, qn)
    mean, P = joint_prior_dense(s, None)
    assert np.array_equal(P, [[a, -a], [-a, b + a]])
    assert np.array_equal(mean, [0.0, 0.0])


def test_joint_prior_inverse_is_covariance_form(rng):
    s = random_structure(rng, 5, 4)
    theta = np.array([0.1, 0.4])
    _, P = joint_prior_dense(s, theta)
    Z = s.Z.toarray()
    Sn = np.linalg.inv(s.q_nu(theta).to_dense())
    Se = np.diag(1 / s.q_eps(theta))
    C = np.block([[Se + Z @ Sn @ Z.T, Z @ Sn], [Sn @ Z.T, Sn]])
    assert np.allclose(np.linalg.inv(P), C, atol=1e-9)


def test_joint_prior_size_limit():
    qe, qn = _fixed(np.ones(5), np.eye(5))
    s = LatentStructure(sp.eye(5), qe, qn)
    with pytest.raises(TooLargeForDense):
        joint_prior_dense(s, None, limit=9)


def test_builders_are_pure(rng):
    s = random_structure(rng, 6, 5)
    theta = np.array([0.3, 0.1])
    assert np.array_equal(s.q_eps(theta), s.q_eps(theta))
    assert np.array_equal(s.q_nu(theta).to_dense(), s.q_nu(theta).to_dense())
