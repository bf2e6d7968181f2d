"""Estimator-style front end to the split sampler."""

from dataclasses import replace
import logging
import warnings

import numpy as np
from sklearn.base import BaseEstimator

from .diagnostics import gelman_rubin
from .exceptions import HessianNotNegativeDefinite
from .sampler import (
    ChainConfig,
    GaussianRWProposal,
    HyperProposal,
    MultiplicativeProposal,
    hessian_for_theta_proposal,
    run_chains,
)

logger = logging.getLogger(__name__)

PROPOSALS = ("auto", "multiplicative", "hessian-rw", "fixed")


def make_proposal(model, kind="auto", F=2.0, c=None):
    """Build the hyperparameter proposal and the model to run it with.

    ``hessian-rw`` locates the mode of ``pi(theta | eta_init)`` (``eta_init``
    being the per-partition estimates) and restarts the model there. If the
    Hessian is not negative definite the multiplicative proposal is used
    instead, when ``theta`` is positive.

    Returns
    -------
    proposal : HyperProposal
    model : ModelSpec
    """
    from .sampler import FixedThetaProposal

    if isinstance(kind, HyperProposal):
        kind.check(model)
        return kind, model
    if kind not in PROPOSALS:
        raise ValueError(f"unknown proposal {kind!r}; expected one of {PROPOSALS}")
    if kind == "auto":
        kind = "multiplicative" if model.theta_positive else "hessian-rw"
    if kind == "fixed":
        return FixedThetaProposal(), model
    if kind == "multiplicative":
        p = MultiplicativeProposal(F)
        p.check(model)
        return p, model
    try:
        theta0, H = hessian_for_theta_proposal(model, model.eta_init)
        return GaussianRWProposal(H, c), replace(model, theta_init=theta0)
    except HessianNotNegativeDefinite as exc:
        if not model.theta_positive:
            raise
        warnings.warn(f"{exc}; falling back to the multiplicative proposal", RuntimeWarning)
        return MultiplicativeProposal(F), model


class SplitSampler(BaseEstimator):
    """Run several split-sampler chains on a latent Gaussian model.

    Parameters
    ----------
    n_iter : int
        Iterations per chain, burn-in included.
    burn_in : int
    n_chains : int
    proposal : {"auto", "multiplicative", "hessian-rw", "fixed"} or HyperProposal
    F : float
        Tuning constant of the multiplicative proposal.
    c : float, optional
        Scaling of the Hessian random walk; ``2.38**2 / dim(theta)`` by default.
    record : tuple of {"eta", "nu", "theta"}
    partitioned : bool
        Accept the data-rich block partition by partition.
    init_jitter : float
        Scale of the random perturbation of the starting ``theta`` per chain.
    random_state : int
    n_jobs : int
        Worker processes for the chains.

    Attributes
    ----------
    traces_ : list of ChainTrace
    acceptance_rates_ : list of dict
    proposal_ : HyperProposal
    model_ : ModelSpec
        The model actually run (``theta_init`` may have been moved to a mode).
    """

    def __init__(self, n_iter=50000, burn_in=10000, n_chains=4, proposal="auto", F=2.0,
                 c=None, record=("eta", "nu", "theta"), partitioned=True, init_jitter=0.0,
                 random_state=0, n_jobs=1):
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.n_chains = n_chains
        self.proposal = proposal
        self.F = F
        self.c = c
        self.record = record
        self.partitioned = partitioned
        self.init_jitter = init_jitter
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, model, y=None):
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        seed = self.random_state
        if seed is None:
            seed = int(np.random.SeedSequence().entropy % (2 ** 63))
        proposal, run_model = make_proposal(model, self.proposal, self.F, self.c)
        config = ChainConfig(
            n_iter=self.n_iter, burn_in=self.burn_in, proposal=proposal,
            record=tuple(self.record), partitioned=self.partitioned,
            init_jitter=self.init_jitter,
        )
        self.traces_ = run_chains(run_model, config, self.n_chains, seed, self.n_jobs)
        self.acceptance_rates_ = [t.acceptance for t in self.traces_]
        self.proposal_ = proposal
        self.model_ = run_model
        self.seed_ = seed
        self.names_ = self.traces_[0].names
        return self

    def _pooled(self):
        return np.concatenate([t.values for t in self.traces_])

    def posterior_mean(self):
        return dict(zip(self.names_, self._pooled().mean(axis=0)))

    def posterior_interval(self, level=0.95):
        """Equal-tailed pooled intervals as ``{name: (low, high)}``."""
        a = (1.0 - level) / 2.0
        lo, hi = np.quantile(self._pooled(), [a, 1.0 - a], axis=0)
        return {n: (l, h) for n, l, h in zip(self.names_, lo, hi)}

    def gelman_rubin(self, cut_points=None, names=None):
        traces = self.traces_ if names is None else [t.select(names) for t in self.traces_]
        return gelman_rubin(traces, cut_points)
