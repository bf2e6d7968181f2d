"""Split sampler for latent Gaussian models."""

from .diagnostics import (
    ChainTrace,
    DiagnosticsReport,
    GelmanRubin,
    autocorrelation,
    diagnose,
    gelman_rubin,
    psrf,
)
from .estimator import SplitSampler, make_proposal
from .exceptions import (
    BadDimension,
    ConfigError,
    DegenerateChains,
    DimensionMismatch,
    HessianNotNegativeDefinite,
    ModeNotFound,
    NonConvergence,
    NonPositiveScale,
    NotPositiveDefinite,
    TooLargeForDense,
)
from .gmrf import LatentStructure, circular_band_precision, conditional_nu_given_eta, lattice_matern_precision
from .sampler import (
    ChainConfig,
    FixedThetaProposal,
    GaussianRWProposal,
    GibbsSampler,
    ModelSpec,
    MultiplicativeProposal,
    find_mode,
    run_chain,
    run_chains,
    sample_data_poor,
    sample_data_rich,
)
from .sparse import CholeskyFactor, SparseSpdMatrix, cholesky, log_det, sample_gmrf, solve

__all__ = [name for name in dir() if not name.startswith("_")]
