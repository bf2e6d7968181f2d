"""Two-block Gibbs sampler for latent Gaussian models.

One iteration updates the data-rich vector ``eta`` with an independence
Metropolis-Hastings step built from a Gaussian approximation at the mode of
``eta | y, nu, theta`` (accepted partition by partition), then updates
``(nu, theta)`` jointly: ``theta`` is accepted or rejected on its own using the
marginal ``pi(theta | eta)``, and ``nu`` is drawn exactly from its Gaussian full
conditional only when ``theta`` moves.
"""

from dataclasses import dataclass, field, replace
import hashlib
import json
import logging
import math

import numpy as np

from .exceptions import (
    DimensionMismatch,
    HessianNotNegativeDefinite,
    ModeNotFound,
    NonConvergence,
    NotPositiveDefinite,
)
from .sparse import cholesky

logger = logging.getLogger(__name__)

MODE_TOL = 1e-8
MODE_MAX_ITER = 100
RIDGE_START = 1e-6
ROUNDING_SLACK = 1e-12
RGG_CONSTANT = 2.38 ** 2


# model ------------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Everything the sampler needs about one latent Gaussian model.

    Parameters
    ----------
    structure : LatentStructure
    likelihood : PartitionedLikelihood
    log_prior : callable
        ``theta -> float``; ``-inf`` marks inadmissible values.
    theta_init : ndarray
    theta_names, nu_names, eta_names : list of str, optional
    eta_init : ndarray, optional
        Starting value of ``eta``; defaults to ``Z mu_nu``.
    theta_positive : bool
        Whether ``theta`` lives on a positive scale (required by the
        multiplicative proposal).
    """

    structure: object
    likelihood: object
    log_prior: object
    theta_init: np.ndarray
    theta_names: list = None
    nu_names: list = None
    eta_names: list = None
    eta_init: np.ndarray = None
    theta_positive: bool = False

    def __post_init__(self):
        s, lik = self.structure, self.likelihood
        if lik.n_eta != s.n_eta:
            raise DimensionMismatch(
                f"likelihood covers {lik.n_eta} latent values, Z has {s.n_eta} rows"
            )
        self.theta_init = np.atleast_1d(np.asarray(self.theta_init, dtype=np.float64))
        if self.theta_names is None:
            self.theta_names = [f"theta[{i}]" for i in range(self.theta_init.size)]
        if self.nu_names is None:
            self.nu_names = [f"nu[{i}]" for i in range(s.n_nu)]
        if self.eta_names is None:
            self.eta_names = [f"eta[{i}]" for i in range(s.n_eta)]
        if self.eta_init is None:
            self.eta_init = s.Z @ s.mu_nu
        self.eta_init = np.asarray(self.eta_init, dtype=np.float64)

    @property
    def n_theta(self):
        return self.theta_init.size


@dataclass
class SplitState:
    eta: np.ndarray
    nu: np.ndarray
    theta: np.ndarray
    iteration: int = 0


# theta-dependent terms ----------------------------------------------------------

class ThetaTerms:
    """Factorizations that depend on ``theta`` only, reused across iterations.

    ``log_marginal(eta)`` returns ``log pi(theta) + log pi(eta | theta)`` up to a
    constant, computed as ``pi(eta | nu=0) pi(nu=0) / pi(nu=0 | eta)`` so that
    only sparse precisions are factorized.
    """

    def __init__(self, model, theta):
        s = model.structure
        self.theta = np.array(theta, dtype=np.float64)
        self.log_prior = float(model.log_prior(self.theta))
        if not np.isfinite(self.log_prior):
            raise ValueError("theta outside the prior support")
        self.structure = s
        self.q_eps = s.q_eps(self.theta)
        if np.any(~(self.q_eps > 0)):
            raise NotPositiveDefinite(int(np.argmin(self.q_eps)), float(np.min(self.q_eps)))
        self.half_logdet_eps = 0.5 * float(np.sum(np.log(self.q_eps)))
        self.Qnu = s.q_nu(self.theta)
        self.Fnu = cholesky(self.Qnu)
        mu = s.mu_nu
        self.prior_quad = float(mu @ (self.Qnu @ mu)) if np.any(mu) else 0.0
        self.Qc = s.conditional_precision(self.q_eps, self.Qnu)
        self.Fc = cholesky(self.Qc)

    def conditional_mean(self, eta):
        rhs = self.structure.conditional_rhs(self.q_eps, self.Qnu, eta)
        return self.Fc.solve(rhs), rhs

    def log_marginal(self, eta):
        m, rhs = self.conditional_mean(eta)
        eta_at_zero = self.half_logdet_eps - 0.5 * float(eta @ (self.q_eps * eta))
        prior_at_zero = 0.5 * self.Fnu.logdet - 0.5 * self.prior_quad
        cond_at_zero = 0.5 * self.Fc.logdet - 0.5 * float(m @ rhs)
        return self.log_prior + eta_at_zero + prior_at_zero - cond_at_zero

    def sample_nu(self, eta, rng):
        m, _ = self.conditional_mean(eta)
        return self.Fc.sample(m, rng)


def log_theta_posterior_ratio(model, theta_star, theta_k, eta):
    """``log pi(theta*|eta) - log pi(theta^k|eta)`` including the prior ratio.

    Returns ``-inf`` when ``theta*`` is inadmissible or yields a non
    positive-definite precision.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    theta_k = np.asarray(theta_k, dtype=np.float64)
    if np.array_equal(theta_star, theta_k):
        return 0.0
    try:
        star = ThetaTerms(model, theta_star)
    except (NotPositiveDefinite, ValueError):
        return -math.inf
    return star.log_marginal(eta) - ThetaTerms(model, theta_k).log_marginal(eta)


# data-rich block -------------------------------------------------------------------

@dataclass
class GaussianApproximation:
    """Partition-wise Gaussian approximation of ``eta | y, nu, theta``.

    ``H`` holds the likelihood Hessian blocks minus any ridge added to make
    ``Q_eps - H`` positive definite, so the proposal precision is exactly
    ``Q_eps - H`` and ``b = grad f(mode) - H mode``.
    """

    index: np.ndarray
    mode: np.ndarray
    H: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    precision: np.ndarray
    chol: np.ndarray
    ridge: np.ndarray
    failed: np.ndarray
    n_iter: int

    @property
    def n_partitions(self):
        return self.index.shape[0]

    def mode_vector(self):
        out = np.empty(self.index.size)
        out[self.index] = self.mode
        return out

    def rho(self, P):
        """Per-partition sums of ``(-1/2 eta^T H - b^T) o eta``."""
        HP = np.einsum("...ij,...j->...i", self.H, P)
        return np.sum((-0.5 * HP - self.b) * P, axis=-1)

    def proposal_logpdf(self, P):
        """Per-partition log-density of the proposal at partition values ``P``."""
        d = P.shape[-1]
        r = P - self.mean
        quad = np.einsum("...i,...ij,...j->...", r, self.precision, r)
        logdet = 2.0 * np.sum(np.log(np.diagonal(self.chol, axis1=-2, axis2=-1)), axis=-1)
        return 0.5 * logdet - 0.5 * quad - 0.5 * d * math.log(2 * math.pi)


def _batched_cholesky(A, ridge_start=RIDGE_START):
    """Per-block Cholesky with doubling ridge for blocks that are not PD."""
    n, d, _ = A.shape
    ridge = np.zeros(n)
    try:
        return np.linalg.cholesky(A), ridge
    except np.linalg.LinAlgError:
        pass
    L = np.empty_like(A)
    eye = np.eye(d)
    for i in range(n):
        delta = 0.0
        while True:
            try:
                L[i] = np.linalg.cholesky(A[i] + delta * eye)
                break
            except np.linalg.LinAlgError:
                delta = ridge_start if delta == 0.0 else 2.0 * delta
                if delta > 1e12:
                    raise
        ridge[i] = delta
    return L, ridge


def _objective(lik_rows, P, q, c):
    f = lik_rows.logpdf_parts(P)
    return f + np.sum(-0.5 * q * P * P + c * P, axis=-1)


def find_mode(lik, s, nu, theta, eta_init, q_eps=None, tol=MODE_TOL,
              max_iter=MODE_MAX_ITER, strict=False):
    """Mode of ``f(eta) - 1/2 eta^T Q_eps eta + (Q_eps Z nu)^T eta`` per partition.

    Newton's method with step halving, started at ``eta_init``. The Hessian of
    the objective is block diagonal over partitions because ``Q_eps`` is
    diagonal, so all partitions are solved side by side.

    Returns
    -------
    GaussianApproximation
        Partitions whose mode could not be located are flagged in ``failed``;
        with ``strict=True`` they raise :class:`ModeNotFound` instead.
    """
    if q_eps is None:
        q_eps = s.q_eps(theta)
    index = lik.index
    q = q_eps[index]
    c = (q_eps * (s.Z @ nu))[index]
    P = np.array(np.asarray(eta_init, dtype=np.float64)[index])
    I, d = P.shape
    eye = np.eye(d)
    active = np.ones(I, dtype=bool)
    failed = np.zeros(I, dtype=bool)
    fobj = _objective(lik, P, q, c)
    bad0 = ~np.isfinite(fobj)
    failed |= bad0
    active &= ~bad0
    it = 0
    g = np.zeros_like(P)
    H = np.zeros((I, d, d))
    while it < max_iter and np.any(active):
        it += 1
        rows = np.flatnonzero(active)
        sub = lik.take(rows)
        Pa, qa, ca = P[rows], q[rows], c[rows]
        _, gf, Hf = sub.derivatives_parts(Pa)
        grad = gf - qa * Pa + ca
        nonfinite = ~np.all(np.isfinite(grad), axis=1) | ~np.all(np.isfinite(Hf), axis=(1, 2))
        conv = (np.max(np.abs(grad), axis=1) < tol) & ~nonfinite
        failed[rows[nonfinite]] = True
        active[rows[conv | nonfinite]] = False
        keep = ~(conv | nonfinite)
        if not np.any(keep):
            break
        rows, Pa, qa, ca = rows[keep], Pa[keep], qa[keep], ca[keep]
        grad, Hf = grad[keep], Hf[keep]
        A = qa[:, :, None] * eye - Hf
        Lc, _ = _batched_cholesky(A)
        step = np.linalg.solve(
            np.swapaxes(Lc, -1, -2), np.linalg.solve(Lc, grad[..., None])
        )[..., 0]
        sub = lik.take(rows)
        f0 = fobj[rows]
        t = np.ones(rows.size)
        moved = np.zeros(rows.size, dtype=bool)
        for _ in range(40):
            trial = Pa + t[:, None] * step
            ft = _objective(sub, trial, qa, ca)
            # near the mode the gain drops below the rounding level of f
            ok = np.isfinite(ft) & (ft >= f0 - ROUNDING_SLACK * np.maximum(1.0, np.abs(f0))) & ~moved
            P[rows[ok]] = trial[ok]
            fobj[rows[ok]] = ft[ok]
            moved |= ok
            if np.all(moved):
                break
            t = np.where(moved, t, 0.5 * t)
        stalled = rows[~moved]
        if stalled.size:
            # no ascent possible within floating point: accept if nearly stationary
            gs = np.max(np.abs(grad[~moved]), axis=1)
            scale = np.maximum(1.0, np.abs(fobj[stalled]))
            near = gs < 1e-6 * scale
            failed[stalled[~near]] = True
            active[stalled] = False
    failed |= active
    # derivatives at the mode
    _, gf, Hf = lik.derivatives_parts(P)
    finite = np.all(np.isfinite(gf), axis=1) & np.all(np.isfinite(Hf), axis=(1, 2))
    failed |= ~finite
    gf = np.where(finite[:, None], gf, 0.0)
    Hf = np.where(finite[:, None, None], Hf, 0.0)
    A = q[:, :, None] * eye - Hf
    chol, ridge = _batched_cholesky(A)
    Heff = Hf - ridge[:, None, None] * eye
    A = q[:, :, None] * eye - Heff
    b = gf - np.einsum("nij,nj->ni", Heff, P)
    mean = np.linalg.solve(
        np.swapaxes(chol, -1, -2), np.linalg.solve(chol, (c + b)[..., None])
    )[..., 0]
    if strict and np.any(failed):
        raise ModeNotFound(np.flatnonzero(failed))
    return GaussianApproximation(
        index=index, mode=P, H=Heff, b=b, mean=mean, precision=A, chol=chol,
        ridge=ridge, failed=failed, n_iter=it,
    )


@dataclass
class DataRichResult:
    eta: np.ndarray
    accepted: np.ndarray
    log_ratio: np.ndarray
    proposal: np.ndarray


def sample_data_rich(eta_k, approx, lik, rng, partitioned=True):
    """One independence Metropolis-Hastings update of ``eta``.

    Draws ``eta*`` from the Gaussian approximation and accepts each partition
    with probability ``min(1, exp(r_i))`` where
    ``r_i = f_i(eta*_i) + rho(eta*)_i - f_i(eta^k_i) - rho(eta^k)_i``. With
    ``partitioned=False`` the whole vector is accepted or rejected with
    ``r = sum_i r_i``. Partitions without a mode keep their current value.
    """
    index = approx.index
    Pk = np.asarray(eta_k, dtype=np.float64)[index]
    I, d = Pk.shape
    z = rng.standard_normal((I, d))
    Pstar = approx.mean + np.linalg.solve(
        np.swapaxes(approx.chol, -1, -2), z[..., None]
    )[..., 0]
    logu = np.log(rng.uniform(size=I if partitioned else 1))
    with np.errstate(invalid="ignore"):
        r = (lik.logpdf_parts(Pstar) + approx.rho(Pstar)) - (
            lik.logpdf_parts(Pk) + approx.rho(Pk)
        )
    r = np.where(np.isnan(r), -np.inf, r)
    if partitioned:
        accept = (logu < r) & ~approx.failed
    else:
        total = -np.inf if np.any(approx.failed) else float(np.sum(r))
        accept = np.full(I, bool(logu[0] < total))
    Pnew = np.where(accept[:, None], Pstar, Pk)
    eta = np.empty(index.size)
    eta[index] = Pnew
    return DataRichResult(eta=eta, accepted=accept, log_ratio=r, proposal=Pstar)


# hyperparameter proposals ------------------------------------------------------------

class HyperProposal:
    """Proposal for ``theta``; ``propose`` returns ``(theta*, log q correction)``."""

    def propose(self, theta, rng):
        raise NotImplementedError

    def check(self, model):
        if model.n_theta != self.dim and self.dim is not None:
            raise DimensionMismatch(f"proposal is for dim {self.dim}, model has {model.n_theta}")

    dim = None


def scaling_factor_cdf(f, F):
    """CDF of the density proportional to ``1 + 1/f`` on ``[1/F, F]``."""
    Z = F - 1.0 / F + 2.0 * math.log(F)
    return ((f - 1.0 / F) + np.log(f * F)) / Z


def sample_scaling_factor(u, F, tol=1e-12, max_iter=100):
    """Inverse-CDF draws of the scaling factor; Newton from the left end."""
    u = np.asarray(u, dtype=np.float64)
    Z = F - 1.0 / F + 2.0 * math.log(F)
    target = u * Z - math.log(F) + 1.0 / F
    f = np.full_like(u, 1.0 / F)
    for _ in range(max_iter):
        g = f + np.log(f) - target
        step = g / (1.0 + 1.0 / f)
        f = f - step
        if np.max(np.abs(step), initial=0.0) < tol:
            break
    return np.clip(f, 1.0 / F, F)


@dataclass
class MultiplicativeProposal(HyperProposal):
    """``theta*_i = f_i theta_i`` with ``f_i`` drawn from ``pi(f) ∝ 1 + 1/f`` on ``[1/F, F]``.

    Symmetric in the sense ``q(theta*|theta) = q(theta|theta*)``, so the
    correction term is zero.
    """

    F: float = 2.0

    def __post_init__(self):
        if not self.F > 1.0:
            raise ValueError(f"F must exceed 1, got {self.F}")

    def check(self, model):
        if not model.theta_positive:
            raise ValueError("multiplicative proposal needs theta on a positive scale")

    def propose(self, theta, rng):
        u = rng.uniform(size=np.shape(theta))
        return np.asarray(theta) * sample_scaling_factor(u, self.F), 0.0


@dataclass
class GaussianRWProposal(HyperProposal):
    """Random walk ``theta* ~ N(theta, (-c H)^{-1})`` with a fixed Hessian ``H``."""

    H: np.ndarray
    c: float = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        if self.c is None:
            self.c = RGG_CONSTANT / self.H.shape[0]
        self.precision = -self.c * self.H
        try:
            self._chol = np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError as exc:
            raise HessianNotNegativeDefinite("-c H is not positive definite") from exc
        self.dim = self.H.shape[0]

    def propose(self, theta, rng):
        z = rng.standard_normal(self.dim)
        return np.asarray(theta) + np.linalg.solve(self._chol.T, z), 0.0


@dataclass
class FixedThetaProposal(HyperProposal):
    """Always proposes the current value (point prior on ``theta``)."""

    def propose(self, theta, rng):
        return np.array(theta, dtype=np.float64), 0.0


def propose_theta(proposal, theta_k, rng):
    return proposal.propose(theta_k, rng)


# data-poor block ----------------------------------------------------------------------

@dataclass
class DataPoorResult:
    nu: np.ndarray
    theta: np.ndarray
    accepted: bool
    log_ratio: float
    terms: ThetaTerms


def sample_data_poor(model, state, eta_new, proposal, rng, terms=None):
    """Joint Metropolis-Hastings update of ``(nu, theta)`` given ``eta``.

    ``terms`` caches the factorizations at the current ``theta``; the returned
    result carries the terms for the new current value.
    """
    if terms is None:
        terms = ThetaTerms(model, state.theta)
    theta_star, log_q = proposal.propose(state.theta, rng)
    logu = math.log(rng.uniform())
    star = terms
    if np.array_equal(theta_star, state.theta):
        log_ratio = 0.0
    else:
        try:
            star = ThetaTerms(model, theta_star)
            log_ratio = star.log_marginal(eta_new) - terms.log_marginal(eta_new) + log_q
        except (NotPositiveDefinite, ValueError):
            log_ratio = -math.inf
    if logu < log_ratio:
        nu = star.sample_nu(eta_new, rng)
        return DataPoorResult(nu, np.array(theta_star), True, log_ratio, star)
    return DataPoorResult(state.nu, state.theta, False, log_ratio, terms)


# driver ---------------------------------------------------------------------------------

@dataclass
class ChainConfig:
    n_iter: int = 50000
    burn_in: int = 10000
    proposal: HyperProposal = None
    record: tuple = ("eta", "nu", "theta")
    partitioned: bool = True
    init_jitter: float = 0.0
    thin: int = 1

    def __post_init__(self):
        if self.burn_in > self.n_iter:
            raise ValueError("burn_in must not exceed n_iter")
        if self.n_iter < 0 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("iteration counts must be non-negative and thin >= 1")
        unknown = set(self.record) - {"eta", "nu", "theta"}
        if unknown:
            raise ValueError(f"unknown record blocks {sorted(unknown)}")

    def fingerprint(self):
        desc = {
            "n_iter": self.n_iter, "burn_in": self.burn_in, "record": list(self.record),
            "partitioned": self.partitioned, "init_jitter": self.init_jitter,
            "thin": self.thin, "proposal": repr(self.proposal),
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


class GibbsSampler:
    """Sequential state machine for one chain."""

    def __init__(self, model, proposal, rng, partitioned=True):
        self.model = model
        self.proposal = proposal
        self.rng = rng
        self.partitioned = partitioned
        proposal.check(model)
        self.terms = None
        self.n_rich = 0
        self.n_rich_accepted = 0
        self.n_poor = 0
        self.n_poor_accepted = 0
        self.n_mode_failures = 0
        self.last_rich = None
        self.last_poor = None

    def initial_state(self, jitter=0.0):
        m = self.model
        theta = m.theta_init.copy()
        if jitter > 0:
            noise = jitter * self.rng.standard_normal(theta.size)
            theta = theta * np.exp(noise) if m.theta_positive else theta + noise
        eta = m.eta_init.copy()
        self.terms = ThetaTerms(m, theta)
        nu = self.terms.sample_nu(eta, self.rng)
        return SplitState(eta=eta, nu=nu, theta=theta, iteration=0)

    def reset_counters(self):
        self.n_rich = self.n_rich_accepted = 0
        self.n_poor = self.n_poor_accepted = 0
        self.n_mode_failures = 0

    def step(self, state):
        m = self.model
        if self.terms is None or not np.array_equal(self.terms.theta, state.theta):
            self.terms = ThetaTerms(m, state.theta)
        approx = find_mode(
            m.likelihood, m.structure, state.nu, state.theta, state.eta,
            q_eps=self.terms.q_eps,
        )
        rich = sample_data_rich(state.eta, approx, m.likelihood, self.rng, self.partitioned)
        self.n_rich += rich.accepted.size
        self.n_rich_accepted += int(rich.accepted.sum())
        self.n_mode_failures += int(approx.failed.sum())
        poor = sample_data_poor(m, state, rich.eta, self.proposal, self.rng, self.terms)
        self.terms = poor.terms
        self.last_rich, self.last_poor = rich, poor
        self.n_poor += 1
        self.n_poor_accepted += int(poor.accepted)
        return SplitState(rich.eta, poor.nu, poor.theta, state.iteration + 1)

    def acceptance(self):
        return {
            "data_rich": self.n_rich_accepted / self.n_rich if self.n_rich else float("nan"),
            "data_poor": self.n_poor_accepted / self.n_poor if self.n_poor else float("nan"),
            "mode_failures": self.n_mode_failures,
        }


def gibbs_step(state, model, rng, proposal, partitioned=True):
    """Single Gibbs sweep (data-rich block, then data-poor block)."""
    return GibbsSampler(model, proposal, rng, partitioned).step(state)


def chain_rng(seed, chain):
    """Independent generator for chain ``chain`` derived from ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(chain),))
    return np.random.Generator(np.random.PCG64(ss))


def _record_names(model, record):
    names = []
    if "eta" in record:
        names += list(model.eta_names)
    if "nu" in record:
        names += list(model.nu_names)
    if "theta" in record:
        names += list(model.theta_names)
    return names


def _record_values(state, record):
    parts = []
    if "eta" in record:
        parts.append(state.eta)
    if "nu" in record:
        parts.append(state.nu)
    if "theta" in record:
        parts.append(state.theta)
    return np.concatenate(parts) if parts else np.zeros(0)


def run_chain(model, config, seed=0, chain=0, rng=None):
    """Run one chain and return its post-burn-in :class:`ChainTrace`."""
    from .diagnostics import ChainTrace

    if rng is None:
        rng = chain_rng(seed, chain)
    proposal = config.proposal if config.proposal is not None else FixedThetaProposal()
    sampler = GibbsSampler(model, proposal, rng, config.partitioned)
    state = sampler.initial_state(config.init_jitter)
    names = _record_names(model, config.record)
    kept = max(0, (config.n_iter - config.burn_in) // config.thin)
    values = np.empty((kept, len(names)))
    iterations = np.empty(kept, dtype=np.int64)
    row = 0
    for k in range(config.n_iter):
        if k == config.burn_in:
            sampler.reset_counters()
        state = sampler.step(state)
        if k >= config.burn_in and (k - config.burn_in + 1) % config.thin == 0 and row < kept:
            values[row] = _record_values(state, config.record)
            iterations[row] = state.iteration
            row += 1
    return ChainTrace(
        names=names, values=values[:row], iterations=iterations[:row], chain_id=chain,
        seed=seed, fingerprint=config.fingerprint(), acceptance=sampler.acceptance(),
        final_state=state,
    )


# Models hold closures, which do not pickle; forked workers inherit the job instead.
_FORK_JOB = None


def _run_forked_chain(chain):
    model, config, seed = _FORK_JOB
    return run_chain(model, config, seed=seed, chain=chain)


def run_chains(model, config, n_chains=4, seed=0, n_jobs=1):
    """Run ``n_chains`` independent chains; ``n_jobs > 1`` uses forked worker processes.

    Every chain draws from its own generator, so the result does not depend
    on ``n_jobs``.
    """
    global _FORK_JOB
    import multiprocessing as mp

    if n_jobs is None or n_jobs <= 1 or n_chains == 1 or "fork" not in mp.get_all_start_methods():
        return [run_chain(model, config, seed=seed, chain=c) for c in range(n_chains)]
    from concurrent.futures import ProcessPoolExecutor

    _FORK_JOB = (model, config, seed)
    try:
        with ProcessPoolExecutor(max_workers=min(n_jobs, n_chains),
                                 mp_context=mp.get_context("fork")) as pool:
            return list(pool.map(_run_forked_chain, range(n_chains)))
    finally:
        _FORK_JOB = None


# hyperparameter curvature ----------------------------------------------------------------

def _fd_hessian(fun, x, step):
    d = x.size
    h = step * np.maximum(1.0, np.abs(x))
    f0 = fun(x)
    H = np.empty((d, d))
    g = np.empty(d)
    E = np.eye(d)
    fp = np.array([fun(x + h[j] * E[j]) for j in range(d)])
    fm = np.array([fun(x - h[j] * E[j]) for j in range(d)])
    for j in range(d):
        g[j] = (fp[j] - fm[j]) / (2 * h[j])
        H[j, j] = (fp[j] - 2 * f0 + fm[j]) / h[j] ** 2
        for k in range(j):
            v = (
                fun(x + h[j] * E[j] + h[k] * E[k]) - fun(x + h[j] * E[j] - h[k] * E[k])
                - fun(x - h[j] * E[j] + h[k] * E[k]) + fun(x - h[j] * E[j] - h[k] * E[k])
            ) / (4 * h[j] * h[k])
            H[j, k] = H[k, j] = v
    return f0, g, H


def theta_log_posterior(model, eta):
    """``theta -> log pi(theta) + log pi(eta | theta)`` (up to a constant)."""

    def fun(theta):
        try:
            return ThetaTerms(model, theta).log_marginal(eta)
        except (NotPositiveDefinite, ValueError):
            return -math.inf

    return fun


def hessian_for_theta_proposal(model, eta_hat, theta_init=None, step=1e-4,
                               max_iter=100, tol=1e-5):
    """Mode ``theta_0`` of ``log pi(theta | eta_hat)`` and the Hessian there.

    Newton's method with finite-difference derivatives (central, relative step
    ``step``) and step halving.

    Raises
    ------
    NonConvergence
        If the mode is not found within ``max_iter`` Newton steps.
    HessianNotNegativeDefinite
        If the Hessian at the mode is not negative definite.
    """
    fun = theta_log_posterior(model, np.asarray(eta_hat, dtype=np.float64))
    x = np.array(model.theta_init if theta_init is None else theta_init, dtype=np.float64)
    f0, g, H = _fd_hessian(fun, x, step)
    if not np.isfinite(f0):
        raise NonConvergence("theta mode", "objective is not finite at the start")
    for it in range(max_iter):
        if np.max(np.abs(g)) < tol * max(1.0, abs(f0)):
            break
        A = -H
        delta = 0.0
        while True:
            try:
                Lc = np.linalg.cholesky(A + delta * np.eye(x.size))
                break
            except np.linalg.LinAlgError:
                delta = 1e-6 * max(1.0, np.max(np.abs(A))) if delta == 0 else 2 * delta
        d = np.linalg.solve(Lc.T, np.linalg.solve(Lc, g))
        t = 1.0
        for _ in range(50):
            xn = x + t * d
            fn = fun(xn)
            if np.isfinite(fn) and fn >= f0:
                break
            t *= 0.5
        else:
            break
        x = xn
        f0, g, H = _fd_hessian(fun, x, step)
    else:
        raise NonConvergence("theta mode", f"after {max_iter} Newton steps")
    H = 0.5 * (H + H.T)
    ev = np.linalg.eigvalsh(H)
    if not np.all(ev < -1e-8 * max(1.0, np.max(np.abs(ev)))):
        raise HessianNotNegativeDefinite(f"Hessian eigenvalues {ev}")
    return x, H
