"""Sparse symmetric positive-definite matrices and their Cholesky factors.

Matrices are stored as the lower triangle in compressed sparse column
layout. Factorization is ``P Q P^T = L L^T`` with a deterministic
fill-reducing permutation ``P``; the symbolic analysis (ordering, elimination
tree, column pointers of ``L``) is cached per sparsity pattern so repeated
factorizations of matrices sharing a pattern only pay the numeric cost.
"""

from collections import OrderedDict
from dataclasses import dataclass
import heapq

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .exceptions import DimensionMismatch, NonPositiveScale, NotPositiveDefinite

__all__ = [
    "SparseSpdMatrix",
    "CholeskyFactor",
    "cholesky",
    "solve",
    "sample_gmrf",
    "log_det",
    "block_diag",
    "kron_diag",
    "minimum_degree_order",
]


class SparseSpdMatrix:
    """Symmetric matrix stored as its lower triangle (CSC).

    Parameters
    ----------
    n : int
        Dimension.
    indptr, indices, data : ndarray
        CSC arrays of the lower triangle, row indices strictly increasing
        within each column and the diagonal present in every column.
    """

    __slots__ = ("n", "indptr", "indices", "data", "_key")

    def __init__(self, n, indptr, indices, data, check=True):
        self.n = int(n)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._key = None
        if check:
            self._validate()

    def _validate(self):
        n, Ap, Ai = self.n, self.indptr, self.indices
        if Ap.shape != (n + 1,) or Ap[0] != 0 or Ap[-1] != Ai.size:
            raise DimensionMismatch("inconsistent CSC column pointers")
        if Ai.size != self.data.size:
            raise DimensionMismatch("indices and data differ in length")
        if n == 0:
            return
        starts = Ap[:-1]
        if np.any(Ap[1:] <= starts):
            raise ValueError("every column must store its diagonal entry")
        if np.any(Ai[starts] != np.arange(n)):
            raise ValueError("first stored entry of each column must be the diagonal")
        steps = np.diff(Ai)
        interior = np.ones(Ai.size - 1, dtype=bool)
        interior[Ap[1:-1] - 1] = False
        if np.any(steps[interior] <= 0):
            raise ValueError("row indices must be strictly increasing within columns")
        if np.any(self.data[starts] <= 0):
            raise ValueError("diagonal entries must be positive")

    # construction ---------------------------------------------------------
    @classmethod
    def from_scipy(cls, A, lower=False, check_symmetric=True):
        """Build from a scipy sparse matrix.

        If ``lower`` is False, ``A`` must be the full symmetric matrix; only its
        lower triangle is kept.
        """
        A = sp.csc_matrix(A, dtype=np.float64)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"matrix is not square: {A.shape}")
        if not lower and check_symmetric:
            asym = A - A.T
            if asym.nnz and np.max(np.abs(asym.data)) != 0.0:
                raise ValueError("matrix is not symmetric")
        T = sp.tril(A, format="csc")
        T.sum_duplicates()
        T.sort_indices()
        return cls(A.shape[0], T.indptr, T.indices, T.data)

    @classmethod
    def from_dense(cls, A):
        A = np.asarray(A, dtype=np.float64)
        return cls.from_scipy(sp.csc_matrix(A))

    @classmethod
    def identity(cls, n, scale=1.0):
        return cls.diagonal(np.full(n, float(scale)))

    @classmethod
    def diagonal(cls, values):
        values = np.asarray(values, dtype=np.float64)
        n = values.size
        return cls(n, np.arange(n + 1), np.arange(n), values.copy())

    # views ----------------------------------------------------------------
    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def nnz(self):
        return int(self.data.size)

    def lower(self):
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def to_scipy(self):
        """Full symmetric matrix as scipy CSC."""
        T = self.lower()
        D = sp.diags(T.diagonal())
        return (T + T.T - D).tocsc()

    def to_dense(self):
        T = self.lower().toarray()
        return T + np.tril(T, -1).T

    def diagonal_values(self):
        return self.data[self.indptr[:-1]].copy()

    def pattern_key(self):
        if self._key is None:
            self._key = (self.n, self.indptr.tobytes(), self.indices.tobytes())
        return self._key

    def with_data(self, data):
        """Same pattern, new values."""
        out = SparseSpdMatrix(self.n, self.indptr, self.indices, data, check=False)
        out._key = self._key
        return out

    def __matmul__(self, x):
        return self.to_scipy() @ x

    def __repr__(self):
        return f"SparseSpdMatrix(n={self.n}, nnz_lower={self.nnz})"


# ordering -----------------------------------------------------------------

def minimum_degree_order(Q):
    """Deterministic minimum-degree elimination order for the graph of ``Q``.

    Ties are broken by the smaller node index.
    """
    n = Q.n
    Ap, Ai = Q.indptr, Q.indices
    adj = [set() for _ in range(n)]
    for j in range(n):
        for i in Ai[Ap[j] + 1:Ap[j + 1]]:
            adj[j].add(int(i))
            adj[int(i)].add(j)
    heap = [(len(adj[i]), i) for i in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    while heap:
        d, v = heapq.heappop(heap)
        if done[v] or d != len(adj[v]):
            continue
        done[v] = True
        order.append(v)
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return np.asarray(order, dtype=np.int64)


@dataclass(frozen=True)
class _Symbolic:
    n: int
    perm: np.ndarray
    Cp: np.ndarray
    Ci: np.ndarray
    Cmap: np.ndarray
    parent: np.ndarray
    Lp: np.ndarray


_SYMBOLIC_CACHE = OrderedDict()
_SYMBOLIC_CACHE_SIZE = 64


def _analyse(Q, ordering):
    key = (ordering,) + Q.pattern_key()
    sym = _SYMBOLIC_CACHE.get(key)
    if sym is not None:
        _SYMBOLIC_CACHE.move_to_end(key)
        return sym
    n = Q.n
    if ordering == "natural":
        perm = np.arange(n, dtype=np.int64)
    elif ordering == "mindegree":
        perm = minimum_degree_order(Q)
    elif ordering == "rcm":
        perm = sp.csgraph.reverse_cuthill_mckee(Q.to_scipy().tocsr(), symmetric_mode=True)
        perm = np.asarray(perm, dtype=np.int64)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n)
    cols = np.repeat(np.arange(n), np.diff(Q.indptr))
    r, c = pinv[Q.indices], pinv[cols]
    row, col = np.minimum(r, c), np.maximum(r, c)
    order = np.lexsort((row, col))
    Ci = np.ascontiguousarray(row[order])
    Cp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(col, minlength=n), out=Cp[1:])
    parent = _kernels.etree(n, Cp, Ci)
    counts = _kernels.column_counts(n, Cp, Ci, parent)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    sym = _Symbolic(n, perm, Cp, Ci, order.astype(np.int64), parent, Lp)
    _SYMBOLIC_CACHE[key] = sym
    if len(_SYMBOLIC_CACHE) > _SYMBOLIC_CACHE_SIZE:
        _SYMBOLIC_CACHE.popitem(last=False)
    return sym


# factor -------------------------------------------------------------------

class CholeskyFactor:
    """``P Q P^T = L L^T`` with ``P`` given by ``perm`` (``(PQP^T)[i,j] = Q[perm[i], perm[j]]``)."""

    __slots__ = ("n", "perm", "Lp", "Li", "Lx", "logdet")

    def __init__(self, n, perm, Lp, Li, Lx):
        self.n = n
        self.perm = perm
        self.Lp = Lp
        self.Li = Li
        self.Lx = Lx
        self.logdet = 2.0 * float(np.sum(np.log(Lx[Lp[:-1]])))

    @property
    def L(self):
        return sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=(self.n, self.n))

    @property
    def P(self):
        return sp.csr_matrix(
            (np.ones(self.n), (np.arange(self.n), self.perm)), shape=(self.n, self.n)
        )

    @property
    def nnz(self):
        return int(self.Lx.size)

    def solve(self, rhs):
        return solve(self, rhs)

    def sample(self, mean, rng, size=None):
        return sample_gmrf(self, mean, rng, size=size)

    def log_det(self):
        return self.logdet

    def half_solve_transpose(self, z):
        """``P^T L^{-T} z``: maps iid normals to draws with precision Q."""
        w = np.array(z, dtype=np.float64, order="C")
        if w.ndim == 1:
            _kernels.ltsolve(self.n, self.Lp, self.Li, self.Lx, w)
        else:
            _kernels.ltsolve_many(self.n, self.Lp, self.Li, self.Lx, w)
        out = np.empty_like(w)
        out[self.perm] = w
        return out


def cholesky(Q, ordering="mindegree"):
    """Sparse Cholesky factorization of a symmetric positive-definite matrix.

    Parameters
    ----------
    Q : SparseSpdMatrix
    ordering : {"mindegree", "natural", "rcm"}
        Fill-reducing permutation. ``natural`` keeps band structure intact.

    Raises
    ------
    NotPositiveDefinite
        If a pivot is not above 1e-300; ``pivot`` is its permuted index.
    """
    if not isinstance(Q, SparseSpdMatrix):
        Q = SparseSpdMatrix.from_scipy(Q)
    sym = _analyse(Q, ordering)
    n = sym.n
    Cx = Q.data[sym.Cmap]
    nnz = int(sym.Lp[-1])
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    status = _kernels.numeric_cholesky(n, sym.Cp, sym.Ci, Cx, sym.parent, sym.Lp, Li, Lx)
    if status >= 0:
        raise NotPositiveDefinite(status, Lx[sym.Lp[status]])
    return CholeskyFactor(n, sym.perm, sym.Lp, Li, Lx)


def solve(factor, rhs):
    """Solve ``Q x = rhs`` for a vector or an (n, k) block of right-hand sides."""
    b = np.asarray(rhs, dtype=np.float64)
    if b.shape[0] != factor.n or b.ndim > 2:
        raise DimensionMismatch(f"rhs has shape {b.shape}, expected leading dim {factor.n}")
    if b.ndim == 2:
        return np.column_stack([solve(factor, b[:, j]) for j in range(b.shape[1])])
    y = np.ascontiguousarray(b[factor.perm])
    _kernels.lsolve(factor.n, factor.Lp, factor.Li, factor.Lx, y)
    _kernels.ltsolve(factor.n, factor.Lp, factor.Li, factor.Lx, y)
    x = np.empty_like(y)
    x[factor.perm] = y
    return x


def sample_gmrf(factor, mean, rng, size=None):
    """Exact draw(s) from N(mean, Q^{-1}) given the factor of Q.

    With ``size`` set, returns an array of shape (size, n).
    """
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (factor.n,):
        raise DimensionMismatch(f"mean has shape {mean.shape}, expected ({factor.n},)")
    if size is None:
        z = rng.standard_normal(factor.n)
        return mean + factor.half_solve_transpose(z)
    z = rng.standard_normal((factor.n, int(size)))
    return (factor.half_solve_transpose(z) + mean[:, None]).T


def log_det(factor):
    return factor.logdet


def block_diag(blocks):
    """Block-diagonal assembly of SPD blocks."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("block_diag needs at least one block")
    T = sp.block_diag([b.lower() for b in blocks], format="csc")
    T.sort_indices()
    return SparseSpdMatrix(T.shape[0], T.indptr, T.indices, T.data)


def kron_diag(scales, B):
    """``diag(scales) ⊗ B`` for strictly positive ``scales``."""
    scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    if scales.size == 0 or np.any(~(scales > 0)):
        raise NonPositiveScale(f"scales must be strictly positive, got {scales}")
    T = sp.kron(sp.diags(scales), B.lower(), format="csc")
    T.sort_indices()
    return SparseSpdMatrix(T.shape[0], T.indptr, T.indices, T.data)
