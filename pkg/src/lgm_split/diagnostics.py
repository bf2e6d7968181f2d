"""Convergence diagnostics: potential scale reduction and autocorrelation."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateChains, DimensionMismatch

N_CUTS = 20
MIN_LENGTH = 10


@dataclass
class ChainTrace:
    """Sampled values of one chain, iteration-major.

    Attributes
    ----------
    names : list of str
    values : ndarray, shape (n_kept, n_params)
    iterations : ndarray of int
        Iteration number of each recorded row.
    chain_id, seed : int
    fingerprint : str
        Hash of the run configuration.
    acceptance : dict
        Acceptance rates per block.
    final_state : object, optional
    """

    names: list
    values: np.ndarray
    iterations: np.ndarray = None
    chain_id: int = 0
    seed: int = 0
    fingerprint: str = ""
    acceptance: dict = field(default_factory=dict)
    final_state: object = None

    def __post_init__(self):
        self.names = list(self.names)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, len(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("parameter names must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trace contains non-finite values")
        if self.iterations is None:
            self.iterations = np.arange(1, self.values.shape[0] + 1)
        self.iterations = np.asarray(self.iterations, dtype=np.int64)
        if self.iterations.shape != (self.values.shape[0],):
            raise DimensionMismatch("one iteration number per row is required")

    def __len__(self):
        return self.values.shape[0]

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def select(self, names):
        cols = [self.names.index(n) for n in names]
        return ChainTrace(
            list(names), self.values[:, cols], self.iterations, self.chain_id, self.seed,
            self.fingerprint, dict(self.acceptance),
        )


def _stack(traces):
    if len(traces) < 2:
        raise ValueError("at least two chains are required")
    names = traces[0].names
    for t in traces[1:]:
        if t.names != names:
            raise DimensionMismatch("chains record different parameters")
        if len(t) != len(traces[0]):
            raise DimensionMismatch("chains have different lengths")
    return names, np.stack([t.values for t in traces])


def psrf(chains):
    """Potential scale reduction for an array of shape (m, n, p).

    ``R = sqrt(((n-1)/n W + B/n) / W)`` with ``W`` the mean within-chain
    variance and ``B = n var(chain means)``.
    """
    chains = np.asarray(chains, dtype=np.float64)
    if chains.ndim == 2:
        chains = chains[..., None]
    m, n, _ = chains.shape
    if n < MIN_LENGTH:
        raise ValueError(f"chains need at least {MIN_LENGTH} draws, got {n}")
    means = chains.mean(axis=1)
    W = chains.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    if np.any(W == 0):
        raise DegenerateChains(f"zero within-chain variance for columns {np.flatnonzero(W == 0).tolist()}")
    return np.sqrt(((n - 1) / n * W + B / n) / W)


def default_cut_points(n, n_cuts=N_CUTS):
    cuts = np.unique(np.round(np.linspace(n / n_cuts, n, n_cuts)).astype(np.int64))
    return cuts[cuts >= MIN_LENGTH]


@dataclass
class GelmanRubin:
    names: list
    cut_points: np.ndarray
    values: np.ndarray  # (n_cuts, n_params)

    def final(self):
        return dict(zip(self.names, self.values[-1]))


def gelman_rubin(traces, cut_points=None):
    """Gelman-Rubin statistic of every parameter over cumulative prefixes.

    Parameters
    ----------
    traces : sequence of ChainTrace
        At least two chains of equal length.
    cut_points : sequence of int, optional
        Prefix lengths; 20 evenly spaced ones by default.

    Returns
    -------
    GelmanRubin
    """
    names, X = _stack(traces)
    n = X.shape[1]
    cuts = default_cut_points(n) if cut_points is None else np.asarray(cut_points, dtype=np.int64)
    if cuts.size == 0 or np.any(cuts > n) or np.any(cuts < MIN_LENGTH):
        raise ValueError(f"cut points must lie in [{MIN_LENGTH}, {n}]")
    values = np.stack([psrf(X[:, :c]) for c in cuts])
    return GelmanRubin(names, cuts, values)


def autocorrelation(trace, parameter=None, max_lag=50):
    """Biased sample autocorrelation at lags ``0..max_lag``.

    ``trace`` is a ChainTrace (with ``parameter`` a name) or a 1-D array.
    """
    x = trace.column(parameter) if isinstance(trace, ChainTrace) else np.asarray(trace, float)
    n = x.size
    if not n > max_lag:
        raise ValueError(f"need more than {max_lag} draws, got {n}")
    x = x - x.mean()
    size = 1 << int(2 * n - 1).bit_length()
    fx = np.fft.rfft(x, size)
    acov = np.fft.irfft(fx * np.conj(fx), size)[: max_lag + 1] / n
    if acov[0] == 0:
        out = np.full(max_lag + 1, np.nan)
    else:
        out = acov / acov[0]
    out[0] = 1.0
    return out


def mean_autocorrelation(traces, parameter, max_lag=50):
    """Autocorrelation averaged over chains."""
    return np.mean([autocorrelation(t, parameter, max_lag) for t in traces], axis=0)


def batch_means_se(x, n_batches=50):
    """Monte Carlo standard error of the mean of each column by batch means."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    b = x.shape[0] // n_batches
    means = x[: b * n_batches].reshape(n_batches, b, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


@dataclass
class DiagnosticsReport:
    gelman_rubin: GelmanRubin
    autocorrelation: dict
    acceptance: list
    max_lag: int

    def gr_rows(self):
        gr = self.gelman_rubin
        for j, name in enumerate(gr.names):
            for c, v in zip(gr.cut_points, gr.values[:, j]):
                yield name, int(c), float(v)

    def acf_rows(self):
        for name, acf in self.autocorrelation.items():
            for lag, v in enumerate(acf):
                yield name, lag, float(v)


def diagnose(traces, max_lag=50, cut_points=None):
    """Gelman-Rubin sequence and chain-averaged ACF for every parameter."""
    gr = gelman_rubin(traces, cut_points)
    acf = {name: mean_autocorrelation(traces, name, max_lag) for name in traces[0].names}
    return DiagnosticsReport(gr, acf, [dict(t.acceptance) for t in traces], max_lag)
