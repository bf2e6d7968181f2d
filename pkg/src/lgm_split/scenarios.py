"""The two demonstration models and their data simulators.

``gaussian``: Gaussian observations with site-wise mean and log-variance, each
modelled by covariates, a Matern field on a regular lattice over the unit
square and unstructured noise. The lattice size changes the dimension of the
data-poor block while the data stay the same.

``gev``: monthly maxima of several rivers with GEV observations whose log
location, log scale and shape follow seasonal models (monthly random effects
with a circular band prior, covariate-specific monthly weights).
"""

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from .exceptions import BadDimension, DimensionMismatch
from .gmrf import (
    BlockDiagonalBuilder,
    LinearPatternBuilder,
    LatentStructure,
    MaternLatticeBuilder,
    circular_band_precision,
)
from .likelihoods import GaussianLikelihood, GevLikelihood, gev_mle_per_partition, gev_quantile
from .sampler import ModelSpec
from .sparse import SparseSpdMatrix, kron_diag

MONTHS = 12


# covariates ---------------------------------------------------------------------

def covariate_generator(n, p, rng, low=1.0, high=1000.0):
    """``n x p`` log-uniform positive covariates, log-transformed and standardized.

    Columns have mean 0 and standard deviation 1.
    """
    raw = np.exp(rng.uniform(math.log(low), math.log(high), size=(n, p)))
    x = np.log(raw)
    x = x - x.mean(axis=0)
    sd = x.std(axis=0)
    x = x / np.where(sd > 0, sd, 1.0)
    return x - x.mean(axis=0)


def _design(x):
    return np.column_stack([np.ones(x.shape[0]), x])


# gaussian lattice model -----------------------------------------------------------

GAUSSIAN_THETA = ("sigma_u_mu", "kappa_u_mu", "sigma_eps_mu", "sigma_u_tau", "kappa_u_tau", "sigma_eps_tau")


@dataclass
class GaussianScenario:
    """Gaussian mean/log-variance model on a lattice.

    ``theta = (sigma_u_mu, kappa_u_mu, sigma_eps_mu, sigma_u_tau, kappa_u_tau,
    sigma_eps_tau)`` on the native positive scale, each with a lognormal prior
    of median ``prior_median`` and log-scale sd ``prior_log_sd``. ``kappa`` is
    the Matern range parameter in unit-square units.
    """

    n_sites: int = 50
    n_years: int = 30
    rows: int = 10
    cols: int = 10
    p_mu: int = 1
    p_tau: int = 1
    kappa_beta_mu: float = 0.0025
    kappa_beta_tau: float = 0.25
    prior_median: tuple = (1.0, 5.0, 0.3, 0.3, 5.0, 0.1)
    prior_log_sd: tuple = (0.5, 0.5, 0.5, 0.5, 0.5, 0.5)
    beta_mu: tuple = (5.0, 1.0)
    beta_tau: tuple = (0.0, 0.3)

    def __post_init__(self):
        if self.rows * self.cols < self.n_sites:
            raise BadDimension("the lattice needs at least as many nodes as sites")
        if len(self.beta_mu) != self.p_mu + 1 or len(self.beta_tau) != self.p_tau + 1:
            raise DimensionMismatch("beta length must be p + 1")

    @property
    def n_nodes(self):
        return self.rows * self.cols


@dataclass
class GaussianDataset:
    sites: np.ndarray  # (I, 2) in the unit square
    x_mu: np.ndarray  # (I, p_mu) without intercept
    x_tau: np.ndarray
    y: np.ndarray  # (I, T)
    truth: dict = field(default_factory=dict)


def lognormal_log_prior(median, log_sd):
    mu = np.log(np.asarray(median, dtype=np.float64))
    s = np.asarray(log_sd, dtype=np.float64)

    def log_prior(theta):
        theta = np.asarray(theta, dtype=np.float64)
        if np.any(~(theta > 0)):
            return -math.inf
        z = (np.log(theta) - mu) / s
        return float(np.sum(-0.5 * z * z - np.log(theta) - np.log(s)))

    return log_prior


def matern_covariance(d, sigma, kappa):
    """Matern covariance with smoothness 1: ``sigma^2 (k d) K_1(k d)``."""
    r = kappa * np.asarray(d, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        c = np.where(r > 0, r * kv(1, np.where(r > 0, r, 1.0)), 1.0)
    return sigma * sigma * c


def simulate_gaussian_data(sc, rng):
    """Sites, covariates and observations with truths drawn from the priors.

    The spatial fields are simulated directly at the sites from the
    continuous Matern covariance, so the data do not depend on the lattice.
    """
    I, T = sc.n_sites, sc.n_years
    sites = rng.uniform(size=(I, 2))
    med, lsd = np.log(sc.prior_median), np.asarray(sc.prior_log_sd)
    theta = np.exp(med + lsd * rng.standard_normal(6))
    x_mu = covariate_generator(I, sc.p_mu, rng)
    x_tau = covariate_generator(I, sc.p_tau, rng)
    d = np.linalg.norm(sites[:, None] - sites[None], axis=-1)
    jitter = 1e-10 * np.eye(I)
    u_mu = np.linalg.cholesky(matern_covariance(d, theta[0], theta[1]) + jitter) @ rng.standard_normal(I)
    u_tau = np.linalg.cholesky(matern_covariance(d, theta[3], theta[4]) + jitter) @ rng.standard_normal(I)
    mu = _design(x_mu) @ np.asarray(sc.beta_mu) + u_mu + theta[2] * rng.standard_normal(I)
    tau = _design(x_tau) @ np.asarray(sc.beta_tau) + u_tau + theta[5] * rng.standard_normal(I)
    y = mu[:, None] + np.exp(0.5 * tau)[:, None] * rng.standard_normal((I, T))
    truth = {"theta": theta, "mu": mu, "tau": tau, "u_mu_sites": u_mu, "u_tau_sites": u_tau}
    return GaussianDataset(sites, x_mu, x_tau, y, truth)


def nearest_node_projection(sites, rows, cols):
    """Incidence matrix mapping each site to its nearest lattice node.

    Nodes sit at cell centres of a ``rows x cols`` grid on the unit square,
    numbered row-major.
    """
    r = np.clip(np.floor(sites[:, 1] * rows), 0, rows - 1).astype(np.int64)
    c = np.clip(np.floor(sites[:, 0] * cols), 0, cols - 1).astype(np.int64)
    I = sites.shape[0]
    return sp.csr_matrix((np.ones(I), (np.arange(I), r * cols + c)), shape=(I, rows * cols))


def gaussian_z(X_mu, A_mu, X_tau, A_tau):
    """``Z`` with row blocks (mu | tau) and columns (beta_mu | u_mu | beta_tau | u_tau)."""
    I = X_mu.shape[0]
    top = sp.hstack([sp.csr_matrix(X_mu), A_mu, sp.csr_matrix((I, X_tau.shape[1] + A_tau.shape[1]))])
    bottom = sp.hstack([sp.csr_matrix((I, X_mu.shape[1] + A_mu.shape[1])), sp.csr_matrix(X_tau), A_tau])
    return sp.vstack([top, bottom]).tocsr()


def build_gaussian_model(sc, data):
    """ModelSpec for the Gaussian lattice model.

    ``eta = (mu_1..mu_I, tau_1..tau_I)``, partitions ``(mu_i, tau_i)``;
    ``nu = (beta_mu, u_mu, beta_tau, u_tau)``.
    """
    I = sc.n_sites
    if data.y.shape[0] != I:
        raise DimensionMismatch("dataset and scenario disagree on the number of sites")
    X_mu, X_tau = _design(data.x_mu), _design(data.x_tau)
    A = nearest_node_projection(data.sites, sc.rows, sc.cols)
    Z = gaussian_z(X_mu, A, X_tau, A)
    h = 1.0 / max(sc.rows, sc.cols)
    matern = MaternLatticeBuilder(sc.rows, sc.cols)
    bmu = SparseSpdMatrix.identity(X_mu.shape[1], sc.kappa_beta_mu)
    btau = SparseSpdMatrix.identity(X_tau.shape[1], sc.kappa_beta_tau)
    qnu = BlockDiagonalBuilder([bmu, matern(1.0, 1.0), btau, matern(1.0, 1.0)])

    def q_nu(theta):
        return qnu([bmu, matern(theta[1] * h, theta[0]), btau, matern(theta[4] * h, theta[3])])

    def q_eps(theta):
        return np.concatenate([np.full(I, theta[2] ** -2), np.full(I, theta[5] ** -2)])

    structure = LatentStructure(Z, q_eps, q_nu)
    lik = GaussianLikelihood(np.column_stack([np.arange(I), I + np.arange(I)]), data.y)
    ybar = np.nanmean(data.y, axis=1)
    lvar = np.log(np.maximum(np.nanvar(data.y, axis=1, ddof=1), 1e-8))
    names_nu = (
        [f"beta_mu[{k}]" for k in range(X_mu.shape[1])]
        + [f"u_mu[{k}]" for k in range(sc.n_nodes)]
        + [f"beta_tau[{k}]" for k in range(X_tau.shape[1])]
        + [f"u_tau[{k}]" for k in range(sc.n_nodes)]
    )
    return ModelSpec(
        structure=structure,
        likelihood=lik,
        log_prior=lognormal_log_prior(sc.prior_median, sc.prior_log_sd),
        theta_init=np.array(sc.prior_median, dtype=np.float64),
        theta_names=list(GAUSSIAN_THETA),
        nu_names=names_nu,
        eta_names=[f"mu[{i}]" for i in range(I)] + [f"tau[{i}]" for i in range(I)],
        eta_init=np.concatenate([ybar, lvar]),
        theta_positive=True,
    )


# seasonal GEV model -------------------------------------------------------------------

@dataclass
class GevScenario:
    """Seasonal GEV model for ``J`` rivers, 12 months and ``T`` years.

    ``theta = (log psi_lambda[0..p], log psi_tau[0..p], log psi_xi,
    log s2_eps_lambda, log s2_eps_tau, log s2_eps_xi)`` with independent
    Gaussian priors (means ``prior_mean``, sds ``prior_sd``, given per group
    and expanded over the ``p + 1`` coordinates of the psi groups).
    """

    n_rivers: int = 10
    n_years: int = 150
    p: int = 2
    kappa: float = 1.0
    sigma_beta_lambda: float = 4.0
    sigma_beta_tau: float = 4.0
    sigma_beta_xi: float = 2.0
    prior_mean: tuple = (math.log(0.1), math.log(0.1), math.log(0.01),
                         math.log(0.01), math.log(0.01), math.log(0.0025))
    prior_sd: tuple = (0.5, 0.5, 0.5, 0.5, 0.5, 0.5)
    beta_lambda: tuple = None
    beta_tau: tuple = None
    beta_xi: float = 0.1

    def __post_init__(self):
        if self.n_rivers < 1:
            raise BadDimension("at least one river is required")
        if self.beta_lambda is None:
            self.beta_lambda = (3.0,) + (0.3,) * self.p
        if self.beta_tau is None:
            self.beta_tau = (1.6,) + (0.2,) * self.p
        if len(self.beta_lambda) != self.p + 1 or len(self.beta_tau) != self.p + 1:
            raise DimensionMismatch("beta length must be p + 1")

    @property
    def n_partitions(self):
        return MONTHS * self.n_rivers

    @property
    def n_theta(self):
        return 2 * (self.p + 1) + 4

    def theta_prior(self):
        k = self.p + 1
        m, s = self.prior_mean, self.prior_sd
        mean = np.array([m[0]] * k + [m[1]] * k + list(m[2:]))
        sd = np.array([s[0]] * k + [s[1]] * k + list(s[2:]))
        return mean, sd

    def theta_names(self):
        k = self.p + 1
        return (
            [f"log_psi_lambda[{i}]" for i in range(k)]
            + [f"log_psi_tau[{i}]" for i in range(k)]
            + ["log_psi_xi", "log_s2_eps_lambda", "log_s2_eps_tau", "log_s2_eps_xi"]
        )

    def nu_names(self):
        k = self.p + 1
        names = [f"beta_lambda[{i}]" for i in range(k)]
        names += [f"u_lambda[{i}][{m}]" for i in range(k) for m in range(MONTHS)]
        names += [f"beta_tau[{i}]" for i in range(k)]
        names += [f"u_tau[{i}][{m}]" for i in range(k) for m in range(MONTHS)]
        names += ["beta_xi"] + [f"u_xi[{m}]" for m in range(MONTHS)]
        return names

    def eta_names(self):
        n = self.n_partitions
        return [f"{v}[{j}][{m}]" for v in ("lambda", "tau", "xi")
                for j in range(self.n_rivers) for m in range(MONTHS)][: 3 * n]


@dataclass
class GevDataset:
    x: np.ndarray  # (J, 12, p) covariates
    y: np.ndarray  # (12 J, T); row k = 12 j + m
    truth: dict = field(default_factory=dict)


def gev_design(x):
    """``X`` (rows river-major, then month) and ``A = (A_0 | ... | A_p)``.

    ``A_i`` is ``diag`` of covariate ``i`` stacked over rivers (``A_0`` the
    intercept), so ``A u`` adds the month-specific weight of each covariate.
    """
    J, M, p = x.shape
    flat = x.reshape(J * M, p)
    X = _design(flat)
    month = np.tile(np.arange(M), J)
    n = J * M
    rows = np.repeat(np.arange(n), p + 1)
    cols = (np.arange(p + 1)[None, :] * M + month[:, None]).ravel()
    A = sp.csr_matrix((X.ravel(), (rows, cols)), shape=(n, M * (p + 1)))
    return X, A


def gev_z(x):
    """``Z`` with row blocks (lambda | tau | xi) and columns
    (beta_lambda | u_lambda | beta_tau | u_tau | beta_xi | u_xi)."""
    J = x.shape[0]
    X, A = gev_design(x)
    n = J * MONTHS
    kx, ka = X.shape[1], A.shape[1]
    Xs = sp.csr_matrix(X)
    xi_block = sp.hstack([sp.csr_matrix(np.ones((n, 1))), sp.kron(np.ones((J, 1)), sp.eye(MONTHS))])
    z = lambda r, c: sp.csr_matrix((r, c))
    rows = [
        sp.hstack([Xs, A, z(n, kx + ka), z(n, 1 + MONTHS)]),
        sp.hstack([z(n, kx + ka), Xs, A, z(n, 1 + MONTHS)]),
        sp.hstack([z(n, 2 * (kx + ka)), xi_block]),
    ]
    return sp.vstack(rows).tocsr()


def _gev_qnu_builder(sc):
    # Q_nu = fixed beta precisions + sum_k (1/psi_k) * (Q_u placed in block k)
    k = sc.p + 1
    Qu = circular_band_precision(sc.kappa, MONTHS).to_scipy()
    beta = np.concatenate([
        np.full(k, sc.sigma_beta_lambda ** -2), np.zeros(MONTHS * k),
        np.full(k, sc.sigma_beta_tau ** -2), np.zeros(MONTHS * k),
        [sc.sigma_beta_xi ** -2], np.zeros(MONTHS),
    ])
    n = beta.size
    starts = (
        [k + MONTHS * i for i in range(k)]
        + [2 * k + MONTHS * (k + i) for i in range(k)]
        + [2 * k + 2 * MONTHS * k + 1]
    )
    terms = [sp.diags(beta).tocsc()]
    for a in starts:
        E = sp.csr_matrix((np.ones(MONTHS), (a + np.arange(MONTHS), np.arange(MONTHS))), shape=(n, MONTHS))
        terms.append((E @ Qu @ E.T).tocsc())
    builder = LinearPatternBuilder(terms)

    def q_nu(theta):
        psi = np.exp(np.asarray(theta[: 2 * k + 1], dtype=np.float64))
        return builder(np.concatenate([[1.0], 1.0 / psi]))

    return q_nu


def _gev_qeps_builder(sc):
    n = sc.n_partitions
    k = sc.p + 1

    def q_eps(theta):
        s2 = np.exp(np.asarray(theta[2 * k + 1:2 * k + 4]))
        return np.repeat(1.0 / s2, n)

    return q_eps


def gaussian_log_prior(mean, sd):
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)

    def log_prior(theta):
        z = (np.asarray(theta, dtype=np.float64) - mean) / sd
        return float(np.sum(-0.5 * z * z - np.log(sd)))

    return log_prior


def gev_structure(sc, x):
    if x.shape != (sc.n_rivers, MONTHS, sc.p):
        raise DimensionMismatch(f"covariates must have shape {(sc.n_rivers, MONTHS, sc.p)}")
    return LatentStructure(gev_z(x), _gev_qeps_builder(sc), _gev_qnu_builder(sc))


def draw_gev_truth(sc, x, rng):
    """Truths for simulation: theta, u and eps from their priors, beta fixed."""
    mean, sd = sc.theta_prior()
    theta = mean + sd * rng.standard_normal(mean.size)
    s = gev_structure(sc, x)
    k = sc.p + 1
    F = s.q_nu(theta)
    from .sparse import cholesky

    nu = cholesky(F).sample(np.zeros(s.n_nu), rng)
    nu[:k] = sc.beta_lambda
    off = k + MONTHS * k
    nu[off:off + k] = sc.beta_tau
    nu[2 * off] = sc.beta_xi
    eps = rng.standard_normal(s.n_eta) / np.sqrt(s.q_eps(theta))
    eta = s.Z @ nu + eps
    return {"theta": theta, "nu": nu, "eta": eta}


def simulate_gev_data(sc, truth, x, rng, n_years=None):
    """Inverse-cdf GEV draws ``y[k, t]`` from the true ``(lambda, tau, xi)``."""
    T = sc.n_years if n_years is None else n_years
    if T < 30:
        raise BadDimension("simulation needs at least 30 years")
    n = sc.n_partitions
    eta = np.asarray(truth["eta"])
    lam, tau, xi = eta[:n], eta[n:2 * n], eta[2 * n:]
    u = rng.uniform(size=(n, T))
    return gev_quantile(u, lam[:, None], tau[:, None], xi[:, None])


def make_gev_dataset(sc, rng):
    """Covariates, truths and observations in one call."""
    x = covariate_generator(sc.n_rivers * MONTHS, sc.p, rng).reshape(sc.n_rivers, MONTHS, sc.p)
    truth = draw_gev_truth(sc, x, rng)
    y = simulate_gev_data(sc, truth, x, rng)
    return GevDataset(x, y, truth)


def make_gaussian_dataset(sc, rng):
    return simulate_gaussian_data(sc, rng)


def build_gev_model(sc, data, eta_init=None, theta_init=None):
    """ModelSpec for the seasonal GEV model.

    ``eta = (lambda, tau, xi)`` each ordered river-major then month;
    partition ``k = 12 j + m`` holds ``(lambda_k, tau_k, xi_k)``. Starting
    values default to the per-partition maximum likelihood estimates and the
    prior means of ``theta``.
    """
    n = sc.n_partitions
    if data.y.shape[0] != n:
        raise DimensionMismatch(f"expected {n} partitions of observations")
    s = gev_structure(sc, data.x)
    lik = GevLikelihood(np.column_stack([np.arange(n), n + np.arange(n), 2 * n + np.arange(n)]), data.y)
    mean, sd = sc.theta_prior()
    if eta_init is None:
        P = gev_mle_per_partition(data.y)
        eta_init = lik.scatter(P)
    return ModelSpec(
        structure=s,
        likelihood=lik,
        log_prior=gaussian_log_prior(mean, sd),
        theta_init=mean.copy() if theta_init is None else theta_init,
        theta_names=sc.theta_names(),
        nu_names=sc.nu_names(),
        eta_names=sc.eta_names(),
        eta_init=eta_init,
        theta_positive=False,
    )


def u_component_slice(sc, block):
    """Slice of ``nu`` holding the monthly effects of ``block``."""
    k = sc.p + 1
    off = k + MONTHS * k
    if block == "lambda":
        return slice(k, k + MONTHS * k)
    if block == "tau":
        return slice(off + k, off + k + MONTHS * k)
    if block == "xi":
        return slice(2 * off + 1, 2 * off + 1 + MONTHS)
    raise ValueError(f"unknown block {block!r}")
