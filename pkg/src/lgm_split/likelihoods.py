"""Partitioned log-likelihoods ``f(eta) = sum_i f_i(eta_i)``.

Each partition ``i`` owns a fixed set of ``d`` positions of ``eta`` (given by
row ``i`` of ``index``) and a row of observations. Evaluation is vectorized
over partitions and over leading "stencil" axes, so that finite-difference
derivatives of all partitions come out of one array expression.
"""

import copy
import logging
import math

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .exceptions import DimensionMismatch, NonConvergence

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
GUMBEL_XI = 1e-6
EULER_GAMMA = 0.5772156649015329


def _ragged_to_padded(groups):
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    T = max((g.size for g in groups), default=0)
    y = np.full((len(groups), T), np.nan)
    for i, g in enumerate(groups):
        y[i, : g.size] = g
    return y


class PartitionedLikelihood:
    """Base class: partition layout plus per-partition observations.

    Parameters
    ----------
    index : array of int, shape (I, d)
        ``index[i]`` are the positions of ``eta_i`` inside ``eta``.
    y : array, shape (I, T) or list of 1-D arrays
        Observations of each partition; NaN marks missing entries.
    """

    dim = None
    _row_attrs = ("index", "y", "mask", "counts")

    def __init__(self, index, y):
        index = np.asarray(index, dtype=np.int64)
        if index.ndim == 1:
            index = index[:, None]
        if self.dim is not None and index.shape[1] != self.dim:
            raise DimensionMismatch(f"partitions must have {self.dim} coordinates")
        flat = np.sort(index.ravel())
        if flat.size and (flat[0] != 0 or np.any(np.diff(flat) != 1)):
            raise ValueError("partitions must be disjoint and cover 0..n_eta-1")
        if isinstance(y, np.ndarray) and y.ndim == 2:
            y = np.array(y, dtype=np.float64)
        else:
            y = _ragged_to_padded(y)
        if y.shape[0] != index.shape[0]:
            raise DimensionMismatch("one row of observations per partition is required")
        self.mask = np.isfinite(y)
        if np.any(self.mask.sum(axis=1) == 0):
            raise ValueError("every partition needs at least one observation")
        self.index = index
        self.y = y
        self.counts = self.mask.sum(axis=1)

    @property
    def n_partitions(self):
        return self.index.shape[0]

    @property
    def n_eta(self):
        return self.index.size

    def take(self, rows):
        """Shallow copy restricted to partitions ``rows`` (for ``*_parts`` calls)."""
        sub = copy.copy(self)
        for name in self._row_attrs:
            setattr(sub, name, getattr(self, name)[rows])
        return sub

    def parts(self, eta):
        return np.asarray(eta, dtype=np.float64)[self.index]

    def scatter(self, values, out=None):
        """Inverse of :meth:`parts` for an (I, d) array."""
        if out is None:
            out = np.empty(self.n_eta)
        out[self.index] = values
        return out

    # interface implemented by subclasses: (..., I, d) -> (..., I) etc.
    def logpdf_parts(self, P):
        raise NotImplementedError

    def gradient_parts(self, P):
        raise NotImplementedError

    def hessian_parts(self, P):
        raise NotImplementedError

    def derivatives_parts(self, P):
        """Value, gradient and Hessian per partition in one pass."""
        return self.logpdf_parts(P), self.gradient_parts(P), self.hessian_parts(P)

    # whole-vector convenience
    def loglik(self, eta):
        return float(np.sum(self.logpdf_parts(self.parts(eta))))

    def gradient(self, eta):
        return self.scatter(self.gradient_parts(self.parts(eta)))

    def hessian(self, eta):
        """Block-diagonal Hessian as a sparse matrix in ``eta`` coordinates."""
        Hp = self.hessian_parts(self.parts(eta))
        I, d = self.index.shape
        rows = np.repeat(self.index, d, axis=1).ravel()
        cols = np.tile(self.index, (1, d)).ravel()
        return sp.csr_matrix((Hp.ravel(), (rows, cols)), shape=(self.n_eta, self.n_eta))


class GaussianLikelihood(PartitionedLikelihood):
    """``y_it ~ N(mu_i, exp(tau_i))`` with ``eta_i = (mu_i, tau_i)``."""

    dim = 2
    _row_attrs = PartitionedLikelihood._row_attrs + ("_n", "_ybar", "_ss")

    def __init__(self, index, y):
        super().__init__(index, y)
        n = self.counts.astype(np.float64)
        ybar = np.where(self.mask, self.y, 0.0).sum(axis=1) / n
        dev = np.where(self.mask, self.y - ybar[:, None], 0.0)
        self._n = n
        self._ybar = ybar
        self._ss = np.sum(dev * dev, axis=1)

    def _quad(self, mu):
        r = self._ybar - mu
        return self._ss + self._n * r * r, r

    def logpdf_parts(self, P):
        mu, tau = P[..., 0], P[..., 1]
        q, _ = self._quad(mu)
        return -0.5 * self._n * (LOG_2PI + tau) - 0.5 * q * np.exp(-tau)

    def gradient_parts(self, P):
        mu, tau = P[..., 0], P[..., 1]
        q, r = self._quad(mu)
        e = np.exp(-tau)
        return np.stack([self._n * r * e, -0.5 * self._n + 0.5 * q * e], axis=-1)

    def hessian_parts(self, P):
        mu, tau = P[..., 0], P[..., 1]
        q, r = self._quad(mu)
        e = np.exp(-tau)
        H = np.empty(P.shape[:-1] + (2, 2))
        H[..., 0, 0] = -self._n * e
        H[..., 0, 1] = H[..., 1, 0] = -self._n * r * e
        H[..., 1, 1] = -0.5 * q * e
        return H


class GaussianMeanLikelihood(PartitionedLikelihood):
    """``y_it ~ N(mu_i, sigma^2)`` with known ``sigma``; ``eta_i = mu_i``.

    Quadratic in ``eta``, so its Gaussian approximation is exact.
    """

    dim = 1
    _row_attrs = PartitionedLikelihood._row_attrs + ("_n", "_ybar", "_ss")

    def __init__(self, index, y, sigma=1.0):
        super().__init__(index, y)
        self.sigma = float(sigma)
        n = self.counts.astype(np.float64)
        ybar = np.where(self.mask, self.y, 0.0).sum(axis=1) / n
        dev = np.where(self.mask, self.y - ybar[:, None], 0.0)
        self._n = n
        self._ybar = ybar
        self._ss = np.sum(dev * dev, axis=1)
        self._prec = 1.0 / (self.sigma * self.sigma)

    def logpdf_parts(self, P):
        r = self._ybar - P[..., 0]
        q = self._ss + self._n * r * r
        return -0.5 * self._n * (LOG_2PI + 2.0 * math.log(self.sigma)) - 0.5 * q * self._prec

    def gradient_parts(self, P):
        return (self._n * self._prec * (self._ybar - P[..., 0]))[..., None]

    def hessian_parts(self, P):
        H = np.empty(P.shape[:-1] + (1, 1))
        H[..., 0, 0] = -self._n * self._prec
        return H


# GEV ------------------------------------------------------------------------

def gev_logpdf(y, lam, tau, xi):
    """Elementwise GEV log-density with location ``exp(lam)``, scale ``exp(tau)``.

    Outside the support the result is ``-inf``. For ``|xi| < 1e-6`` the Gumbel
    density plus its first-order correction in ``xi`` is used, which equals the
    Gumbel limit at ``xi = 0`` and stays continuous across the switch.
    """
    y, lam, tau, xi = (np.asarray(a, dtype=np.float64) for a in (y, lam, tau, xi))
    z = (y - np.exp(lam)) * np.exp(-tau)
    small = np.abs(xi) < GUMBEL_XI
    xz = xi * z
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ok = xz > -1.0
        L = np.log1p(np.where(ok, xz, 0.0))
        xs = np.where(small, 1.0, xi)
        general = -tau - (1.0 + 1.0 / xs) * L - np.exp(-L / xs)
        if np.any(small):
            ez = np.exp(-z)
            gumbel = -tau - z - ez - xi * (z - 0.5 * z * z + 0.5 * z * z * ez)
            general = np.where(small, gumbel, general)
    return np.where(ok, general, -np.inf)


def gev_cdf(y, lam, tau, xi):
    y, lam, tau, xi = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (y, lam, tau, xi))
    )
    z = (y - np.exp(lam)) * np.exp(-tau)
    xz = xi * z
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ok = xz > -1.0
        L = np.log1p(np.where(ok, xz, 0.0))
        xs = np.where(xi == 0.0, 1.0, xi)
        general = np.exp(-np.exp(-L / xs))
        gumbel = np.exp(-np.exp(-z))
        out = np.where(xi == 0.0, gumbel, general)
    # below the lower bound (xi > 0) F = 0, above the upper bound (xi < 0) F = 1
    return np.where(ok, out, np.where(xi > 0, 0.0, 1.0))


def gev_quantile(u, lam, tau, xi):
    """Inverse of :func:`gev_cdf` for ``u`` in (0, 1)."""
    u, lam, tau, xi = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (u, lam, tau, xi))
    )
    w = np.log(-np.log(u))
    xs = np.where(xi == 0.0, 1.0, xi)
    scaled = np.where(xi == 0.0, -w, np.expm1(-xi * w) / xs)
    return np.exp(lam) + np.exp(tau) * scaled


def _axis_steps(P, rel):
    return rel * np.maximum(1.0, np.abs(P))


class GevLikelihood(PartitionedLikelihood):
    """GEV observations with ``eta_i = (log location, log scale, shape)``.

    Derivatives are central finite differences of the log-density, formed per
    observation before summing so that rounding does not scale with ``T``.
    """

    dim = 3
    grad_step = 1e-5
    hess_step = 1e-4

    def _obs_logpdf(self, P):
        y = self.y
        lam, tau, xi = P[..., 0:1], P[..., 1:2], P[..., 2:3]
        lp = gev_logpdf(np.where(self.mask, y, 0.0), lam, tau, xi)
        return np.where(self.mask, lp, 0.0)

    def logpdf_parts(self, P):
        return np.sum(self._obs_logpdf(np.asarray(P, dtype=np.float64)), axis=-1)

    def _grad_from_stencil(self, P, h):
        d = self.dim
        E = np.eye(d).reshape((d,) + (1,) * (P.ndim - 1) + (d,))
        pts = np.concatenate([P[None] + h[None] * E, P[None] - h[None] * E])
        V = self._obs_logpdf(pts).reshape((2, d) + P.shape[:-1] + (-1,))
        with np.errstate(invalid="ignore"):
            G = np.sum(V[0] - V[1], axis=-1) / (2.0 * np.moveaxis(h, -1, 0))
        return np.moveaxis(G, 0, -1)

    def gradient_parts(self, P):
        P = np.asarray(P, dtype=np.float64)
        return self._grad_from_stencil(P, _axis_steps(P, self.grad_step))

    def hessian_parts(self, P):
        P = np.asarray(P, dtype=np.float64)
        return self._hessian(P, _axis_steps(P, self.hess_step))

    def _hessian(self, P, h):
        d = self.dim
        pairs = [(j, k) for j in range(d) for k in range(j)]
        S = _hessian_stencil(d)
        shape = (S.shape[0],) + (1,) * (P.ndim - 1) + (d,)
        V = self._obs_logpdf(P[None] + S.reshape(shape) * h[None])
        f0 = V[0]
        H = np.empty(P.shape + (d,))
        with np.errstate(invalid="ignore"):
            for j in range(d):
                fp, fm = V[1 + 2 * j], V[2 + 2 * j]
                H[..., j, j] = np.sum((fp - f0) + (fm - f0), axis=-1) / (h[..., j] ** 2)
            base = 1 + 2 * d
            for c, (j, k) in enumerate(pairs):
                fpp, fpm, fmp, fmm = V[base + 4 * c: base + 4 * c + 4]
                v = np.sum((fpp - fpm) - (fmp - fmm), axis=-1) / (4.0 * h[..., j] * h[..., k])
                H[..., j, k] = H[..., k, j] = v
        return H

    def derivatives_parts(self, P):
        P = np.asarray(P, dtype=np.float64)
        return self.logpdf_parts(P), self.gradient_parts(P), self.hessian_parts(P)


def _hessian_stencil(d):
    """Offsets (in step units): centre, then +-e_j, then the four corners of each pair."""
    E = np.eye(d)
    rows = [np.zeros(d)]
    for j in range(d):
        rows += [E[j], -E[j]]
    for j in range(d):
        for k in range(j):
            rows += [E[j] + E[k], E[j] - E[k], -E[j] + E[k], -E[j] - E[k]]
    return np.array(rows)


# maximum likelihood -------------------------------------------------------------

def _gev_start(y, mask):
    n = mask.sum(axis=1)
    yz = np.where(mask, y, 0.0)
    mean = yz.sum(axis=1) / n
    var = np.where(mask, (y - mean[:, None]) ** 2, 0.0).sum(axis=1) / np.maximum(n - 1, 1)
    sd = np.sqrt(var)
    degenerate = ~(sd > 0)
    sigma = np.where(degenerate, np.exp(-20.0), sd * math.sqrt(6.0) / math.pi)
    mu = mean - EULER_GAMMA * sigma
    mu = np.where(mu > 0, mu, np.maximum(mean, 1e-8))
    tau = np.maximum(np.log(sigma), -20.0)
    return np.column_stack([np.log(mu), tau, np.full(y.shape[0], 0.1)]), degenerate


class GevMLE(BaseEstimator):
    """Per-partition GEV maximum likelihood in ``(log mu, log sigma, xi)``.

    Newton's method with step halving from a moment-based start. Partitions
    with constant data are flagged degenerate and get ``log sigma = -20``.

    Parameters
    ----------
    max_iter : int
    tol : float
        Convergence threshold on the largest absolute gradient entry.

    Attributes
    ----------
    params_ : ndarray, shape (I, 3)
    degenerate_ : ndarray of bool, shape (I,)
    n_iter_ : int
    """

    def __init__(self, max_iter=200, tol=1e-6):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, y):
        lik = y if isinstance(y, GevLikelihood) else GevLikelihood(
            np.arange(3 * len(y)).reshape(-1, 3), y
        )
        P, degenerate = _gev_start(lik.y, lik.mask)
        # out-of-support starts fall back to the Gumbel start
        bad = ~np.isfinite(lik.logpdf_parts(P))
        P[bad, 2] = 0.0
        active = ~degenerate
        f = lik.logpdf_parts(P)
        for it in range(self.max_iter):
            if not np.any(active):
                break
            idx = np.flatnonzero(active)
            _, g, H = lik.derivatives_parts(P)
            g, H = g[idx], H[idx]
            done = np.max(np.abs(g), axis=1) < self.tol
            active[idx[done]] = False
            idx, g, H = idx[~done], g[~done], H[~done]
            if idx.size == 0:
                break
            step = _newton_ascent_direction(H, g)
            t = np.ones(idx.size)
            moved = np.zeros(idx.size, dtype=bool)
            for _ in range(40):
                trial = P[idx] + t[:, None] * step
                sub = lik.take(idx)
                ft = sub.logpdf_parts(trial)
                better = np.isfinite(ft) & (ft >= f[idx]) & ~moved
                P[idx[better]] = trial[better]
                f[idx[better]] = ft[better]
                moved |= better
                if np.all(moved):
                    break
                t = np.where(moved, t, 0.5 * t)
            # stalled partitions are at the limit of the finite differences
            active[idx[~moved]] = False
        self.n_iter_ = it + 1
        _, g, _ = lik.derivatives_parts(P)
        gmax = np.max(np.abs(g), axis=1)
        failing = np.flatnonzero(~degenerate & ~(gmax < max(self.tol, 1e-4)))
        if failing.size:
            raise NonConvergence(failing.tolist(), "in GEV maximum likelihood")
        if np.any(degenerate):
            logger.warning("constant data in partitions %s", np.flatnonzero(degenerate).tolist())
        self.params_ = P
        self.degenerate_ = degenerate
        self.loglik_ = f
        return self


def _newton_ascent_direction(H, g):
    """Solve ``(-H + delta I) s = g`` per partition, ``delta`` doubling until PD."""
    d = g.shape[-1]
    A = -H
    out = np.empty_like(g)
    for i in range(g.shape[0]):
        delta = 0.0
        for _ in range(60):
            try:
                c = np.linalg.cholesky(A[i] + delta * np.eye(d))
                break
            except np.linalg.LinAlgError:
                delta = 1e-6 if delta == 0.0 else 2.0 * delta
        out[i] = np.linalg.solve(c.T, np.linalg.solve(c, g[i]))
    return out


def gev_mle_per_partition(data, max_iter=200):
    """Per-partition GEV MLE; ``data`` is an (I, T) array or list of arrays."""
    return GevMLE(max_iter=max_iter).fit(data).params_
