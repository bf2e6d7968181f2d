"""Latent-model structure ``eta = Z nu + eps`` and its Gaussian identities.

``nu ~ N(mu_nu, Q_nu^{-1})`` and ``eta | nu ~ N(Z nu, Q_eps^{-1})`` with
``Q_eps`` diagonal. The full conditional of ``nu`` given ``eta`` has
precision ``Q_nu + Z^T Q_eps Z``, which keeps the sparsity of both terms.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .exceptions import BadDimension, DimensionMismatch, TooLargeForDense
from .sparse import CholeskyFactor, SparseSpdMatrix, cholesky

DENSE_LIMIT = 500


def circular_band_precision(kappa, n):
    """Circulant pentadiagonal precision with band
    ``[1, -2(k^2+2), k^4+4k^2+6, -2(k^2+2), 1]``.

    Equal to ``(k^2 I + D)^2`` where ``D`` is the circular second-difference
    operator with stencil ``[-1, 2, -1]``; positive definite for ``k > 0``.
    """
    if n < 5:
        raise BadDimension(f"circular band needs n >= 5, got {n}")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    k2 = kappa * kappa
    band = {0: k2 * k2 + 4 * k2 + 6, 1: -2 * (k2 + 2), 2: 1.0}
    rows, cols, vals = [], [], []
    idx = np.arange(n)
    for off, v in band.items():
        rows.append(idx)
        cols.append((idx + off) % n)
        vals.append(np.full(n, v))
        if off:
            rows.append(idx)
            cols.append((idx - off) % n)
            vals.append(np.full(n, v))
    Q = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsc()
    return SparseSpdMatrix.from_scipy(Q)


def lattice_laplacian(rows, cols):
    """Graph Laplacian of the 4-neighbour ``rows x cols`` lattice (row-major nodes)."""

    def path(m):
        if m == 1:
            return sp.csr_matrix((1, 1))
        d = np.full(m, 2.0)
        d[0] = d[-1] = 1.0
        return sp.diags([-np.ones(m - 1), d, -np.ones(m - 1)], [-1, 0, 1])

    return (sp.kron(path(rows), sp.eye(cols)) + sp.kron(sp.eye(rows), path(cols))).tocsc()


def lattice_matern_precision(rows, cols, kappa):
    """Matern (alpha = 2) lattice precision ``(k^2 I + G)^T (k^2 I + G)``.

    ``G`` is the 5-point lattice Laplacian and the mass matrix is the identity,
    so everything is in lattice units.
    """
    if rows < 1 or cols < 1 or rows * cols < 4:
        raise BadDimension(f"lattice {rows}x{cols} is too small")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    K = kappa * kappa * sp.eye(rows * cols) + lattice_laplacian(rows, cols)
    return SparseSpdMatrix.from_scipy((K.T @ K).tocsc())


def _sorted_keys(T, n):
    cols = np.repeat(np.arange(T.shape[1]), np.diff(T.indptr))
    return cols * n + T.indices


@dataclass
class LatentStructure:
    """``Z``, builders for ``Q_eps`` (diagonal) and ``Q_nu``, and ``mu_nu``.

    Parameters
    ----------
    Z : sparse matrix, shape (n_eta, n_nu)
    q_eps_builder : callable
        ``theta -> ndarray`` of the ``n_eta`` positive diagonal entries.
    q_nu_builder : callable
        ``theta -> SparseSpdMatrix`` of size ``n_nu``.
    mu_nu : ndarray, optional
        Prior mean of ``nu``; zero by default.
    """

    Z: sp.spmatrix
    q_eps_builder: Callable
    q_nu_builder: Callable
    mu_nu: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.Z = sp.csr_matrix(self.Z, dtype=np.float64)
        n_nu = self.Z.shape[1]
        if self.mu_nu is None:
            self.mu_nu = np.zeros(n_nu)
        self.mu_nu = np.asarray(self.mu_nu, dtype=np.float64)
        if self.mu_nu.shape != (n_nu,):
            raise DimensionMismatch("mu_nu length must equal the number of columns of Z")
        self._setup_ztz()

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_cache"] = {}
        return state

    @property
    def n_eta(self):
        return self.Z.shape[0]

    @property
    def n_nu(self):
        return self.Z.shape[1]

    def _setup_ztz(self):
        # data of tril(Z^T diag(q) Z) is W @ q for a fixed sparse W
        Z = self.Z.tocsr()
        n = self.n_nu
        rows_i, rows_j, rows_k, vals = [], [], [], []
        for k in range(Z.shape[0]):
            cols = Z.indices[Z.indptr[k]:Z.indptr[k + 1]]
            v = Z.data[Z.indptr[k]:Z.indptr[k + 1]]
            if cols.size == 0:
                continue
            I, J = np.meshgrid(cols, cols, indexing="ij")
            V = np.outer(v, v)
            keep = I >= J
            rows_i.append(I[keep])
            rows_j.append(J[keep])
            rows_k.append(np.full(int(keep.sum()), k))
            vals.append(V[keep])
        if rows_i:
            ri, rj = np.concatenate(rows_i), np.concatenate(rows_j)
            rk, rv = np.concatenate(rows_k), np.concatenate(vals)
        else:
            ri = rj = rk = np.zeros(0, dtype=np.int64)
            rv = np.zeros(0)
        keys = rj * n + ri
        ukeys, pos = np.unique(keys, return_inverse=True)
        self._ztz_keys = ukeys
        self._ztz_W = sp.csr_matrix((rv, (pos, rk)), shape=(ukeys.size, self.n_eta))

    def q_eps(self, theta):
        q = np.asarray(self.q_eps_builder(theta), dtype=np.float64)
        if q.shape != (self.n_eta,):
            raise DimensionMismatch(f"Q_eps diagonal has shape {q.shape}")
        return q

    def q_nu(self, theta):
        Q = self.q_nu_builder(theta)
        if Q.n != self.n_nu:
            raise DimensionMismatch(f"Q_nu has size {Q.n}, expected {self.n_nu}")
        return Q

    def _union_maps(self, Qnu):
        key = Qnu.pattern_key()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        n = self.n_nu
        qkeys = _sorted_keys(Qnu.lower(), n)
        ukeys = np.union1d(qkeys, self._ztz_keys)
        cols = ukeys // n
        rows = ukeys - cols * n
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols, minlength=n), out=indptr[1:])
        rows = rows.astype(np.int64)
        hit = (
            indptr,
            rows,
            np.searchsorted(ukeys, qkeys),
            np.searchsorted(ukeys, self._ztz_keys),
            (n, indptr.tobytes(), rows.tobytes()),
        )
        self._cache.clear()
        self._cache[key] = hit
        return hit

    def conditional_precision(self, q_eps, Qnu):
        """``Q_nu + Z^T diag(q_eps) Z`` on the union sparsity pattern."""
        indptr, indices, qpos, zpos, key = self._union_maps(Qnu)
        data = np.zeros(indices.size)
        data[qpos] = Qnu.data
        data[zpos] += self._ztz_W @ q_eps
        out = SparseSpdMatrix(self.n_nu, indptr, indices, data, check=False)
        out._key = key
        return out

    def conditional_rhs(self, q_eps, Qnu, eta):
        """``Q_nu mu_nu + Z^T Q_eps eta``."""
        rhs = self.Z.T @ (q_eps * eta)
        if np.any(self.mu_nu):
            rhs = rhs + Qnu @ self.mu_nu
        return rhs


@dataclass(frozen=True)
class ConditionalGaussian:
    """Gaussian full conditional given as mean and factorized precision."""

    mean: np.ndarray
    precision: SparseSpdMatrix
    factor: CholeskyFactor

    def __post_init__(self):
        if self.mean.shape != (self.factor.n,):
            raise DimensionMismatch("mean length must equal precision dimension")

    def sample(self, rng):
        return self.factor.sample(self.mean, rng)


def conditional_nu_given_eta(s, theta, eta):
    """Full conditional ``nu | eta, theta``.

    Mean ``Q_c^{-1}(Q_nu mu_nu + Z^T Q_eps eta)`` with precision
    ``Q_c = Q_nu + Z^T Q_eps Z``.
    """
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (s.n_eta,):
        raise DimensionMismatch(f"eta has shape {eta.shape}, expected ({s.n_eta},)")
    q_eps = s.q_eps(theta)
    Qnu = s.q_nu(theta)
    Qc = s.conditional_precision(q_eps, Qnu)
    F = cholesky(Qc)
    mean = F.solve(s.conditional_rhs(q_eps, Qnu, eta))
    return ConditionalGaussian(mean, Qc, F)


def joint_prior_dense(s, theta, limit=DENSE_LIMIT):
    """Dense mean and precision of the joint prior of ``(eta, nu)``.

    Test-oracle helper; refuses problems larger than ``limit``.
    """
    n_eta, n_nu = s.n_eta, s.n_nu
    if n_eta + n_nu > limit:
        raise TooLargeForDense(f"{n_eta + n_nu} > dense limit {limit}")
    Qe = np.diag(s.q_eps(theta))
    Qn = s.q_nu(theta).to_dense()
    Z = s.Z.toarray()
    mean = np.concatenate([Z @ s.mu_nu, s.mu_nu])
    prec = np.block([[Qe, -Qe @ Z], [-Z.T @ Qe, Qn + Z.T @ Qe @ Z]])
    return mean, prec


class LinearPatternBuilder:
    """``sum_k c_k T_k`` for fixed symmetric terms, on one shared pattern.

    Every call returns a matrix that shares the pattern (and cached symbolic
    analysis) of the first, so refactorizations are numeric only.
    """

    def __init__(self, terms):
        lowers = [t.lower() if isinstance(t, SparseSpdMatrix) else _lower_pattern(t) for t in terms]
        n = lowers[0].shape[0]
        keys = [_sorted_keys(t, n) for t in lowers]
        diag = np.arange(n, dtype=np.int64) * (n + 1)
        ukeys = np.unique(np.concatenate(keys + [diag]))
        cols = ukeys // n
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols, minlength=n), out=indptr[1:])
        self.n = n
        self._M = np.zeros((len(lowers), ukeys.size))
        for k, (t, kk) in enumerate(zip(lowers, keys)):
            self._M[k, np.searchsorted(ukeys, kk)] = t.data
        self._template = SparseSpdMatrix(
            n, indptr, (ukeys - cols * n).astype(np.int64), np.ones(ukeys.size), check=False
        )
        self._template.pattern_key()

    def __call__(self, coefs):
        return self._template.with_data(np.asarray(coefs, dtype=np.float64) @ self._M)


def _lower_pattern(T):
    T = sp.tril(T, format="csc")
    T.sum_duplicates()
    T.sort_indices()
    return T


class MaternLatticeBuilder:
    """``(k^2 I + G)^2 / (4 pi sigma^2 k^2)`` on a ``rows x cols`` lattice.

    With ``k`` the range parameter in lattice units this is the alpha = 2
    Matern precision with marginal variance close to ``sigma^2`` away from
    the boundary.
    """

    def __init__(self, rows, cols):
        if rows < 1 or cols < 1 or rows * cols < 4:
            raise BadDimension(f"lattice {rows}x{cols} is too small")
        G = lattice_laplacian(rows, cols)
        n = rows * cols
        self.n = n
        self._lin = LinearPatternBuilder(
            [_lower_pattern(sp.eye(n, format="csc")), _lower_pattern(G), _lower_pattern(G @ G)]
        )

    def __call__(self, kappa, sigma):
        if not (kappa > 0 and sigma > 0):
            raise ValueError("kappa and sigma must be positive")
        k2 = kappa * kappa
        c = 1.0 / (4.0 * np.pi * sigma * sigma * k2)
        return self._lin([c * k2 * k2, 2.0 * c * k2, c])


class BlockDiagonalBuilder:
    """Block-diagonal assembly on a fixed pattern from per-block data arrays."""

    def __init__(self, templates):
        from .sparse import block_diag

        self._template = block_diag(templates)
        self._template.pattern_key()
        self._sizes = [t.nnz for t in templates]

    def __call__(self, blocks):
        data = np.concatenate([b.data for b in blocks])
        if data.size != self._template.nnz:
            raise DimensionMismatch("block patterns differ from the template")
        return self._template.with_data(data)
