"""On-disk formats: run configuration, trace and diagnostics CSVs, datasets."""

from dataclasses import dataclass, fields
import csv
import glob
import hashlib
import json
import os
import re

import numpy as np

from .diagnostics import ChainTrace
from .exceptions import ConfigError

# configuration ---------------------------------------------------------------------

_SCENARIOS = ("gaussian", "gev")
_PROPOSALS = ("auto", "multiplicative", "hessian-rw")
_RECORD = ("eta", "nu", "theta")


@dataclass
class RunConfig:
    """Settings of one run, read from a flat ``key = value`` file."""

    scenario: str = "gev"
    seed: int = 0
    data_seed: int = None
    chains: int = 4
    iterations: int = 50000
    burnin: int = 10000
    proposal: str = "auto"
    F: float = 1.3
    c: float = None
    record: tuple = _RECORD
    partitioned: bool = True
    init_jitter: float = 0.0
    data: str = None
    out: str = None
    # gaussian scenario
    sites: int = 50
    years: int = 30
    rows: int = 10
    cols: int = 10
    # gev scenario
    rivers: int = 3
    covariates: int = 1

    def validate(self, lines=None):
        lines = lines or {}

        def fail(name, msg):
            raise ConfigError(msg, field=name, line=lines.get(name))

        if self.scenario not in _SCENARIOS:
            fail("scenario", f"must be one of {_SCENARIOS}, got {self.scenario!r}")
        if self.proposal not in _PROPOSALS:
            fail("proposal", f"must be one of {_PROPOSALS}, got {self.proposal!r}")
        if self.chains < 1:
            fail("chains", "must be at least 1")
        if self.iterations < 0:
            fail("iterations", "must be non-negative")
        if self.burnin < 0 or self.burnin > self.iterations:
            fail("burnin", "must lie between 0 and iterations")
        if not self.F > 1.0:
            fail("F", "must exceed 1")
        if self.c is not None and not self.c > 0:
            fail("c", "must be positive")
        if self.seed < 0 or self.seed >= 2 ** 64:
            fail("seed", "must be an unsigned 64-bit integer")
        bad = set(self.record) - set(_RECORD)
        if bad or not self.record:
            fail("record", f"entries must be among {_RECORD}")
        for name in ("sites", "years", "rows", "cols", "rivers"):
            if getattr(self, name) < 1:
                fail(name, "must be positive")
        if self.covariates < 0:
            fail("covariates", "must be non-negative")
        if self.scenario == "gev" and self.proposal == "multiplicative":
            fail("proposal", "multiplicative proposal needs positive theta; the gev model uses log scale")
        return self

    def canonical(self):
        """Deterministic text form used for hashing."""
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "out"}
        d["record"] = list(d["record"])
        return json.dumps(d, sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _coerce(name, raw, line):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown key {name!r}", field=name, line=line)
    kind = kinds[name]
    try:
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if kind is tuple:
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as {kind.__name__}", field=name, line=line) from None


def parse_config(text):
    """Parse ``key = value`` lines (``#`` starts a comment) into a RunConfig."""
    values, lines = {}, {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=no)
        key, value = (s.strip() for s in line.split("=", 1))
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", key):
            raise ConfigError(f"invalid key {key!r}", line=no)
        if key in values:
            raise ConfigError("duplicate key", field=key, line=no)
        values[key] = _coerce(key, value, no)
        lines[key] = no
    return RunConfig(**values).validate(lines), lines


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# traces --------------------------------------------------------------------------------

class TraceFormatError(ValueError):
    """A trace or diagnostics file that cannot be read back."""


def _fmt(x):
    return repr(float(x))


def _check_names(names):
    bad = [n for n in names if any(ch in n for ch in ',"\n\r')]
    if bad:
        raise ValueError(f"parameter names cannot contain commas, quotes or newlines: {bad[:3]}")


def write_trace(trace, path):
    """CSV with header ``iteration,<names>``; floats in shortest round-trip form."""
    _check_names(trace.names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["iteration"] + list(trace.names)) + "\n")
        for it, row in zip(trace.iterations.tolist(), trace.values.tolist()):
            fh.write(str(it) + "," + ",".join(map(repr, row)) + "\n")


def read_trace(path, chain_id=0):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "iteration":
            raise TraceFormatError(f"{path}: first column must be 'iteration'")
        rows = list(reader)
    names = header[1:]
    width = len(header)
    for no, r in enumerate(rows, start=2):
        if len(r) != width:
            raise TraceFormatError(f"{path}: line {no} has {len(r)} fields, expected {width}")
    try:
        its = np.array([int(r[0]) for r in rows], dtype=np.int64)
        vals = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
        return ChainTrace(names, vals.reshape(len(rows), len(names)), its, chain_id=chain_id)
    except ValueError as exc:
        raise TraceFormatError(f"{path}: {exc}") from None


def chain_files(directory):
    files = glob.glob(os.path.join(directory, "chain_*.csv"))
    key = lambda p: int(re.search(r"chain_(\d+)\.csv$", p).group(1))
    return sorted((p for p in files if re.search(r"chain_(\d+)\.csv$", p)), key=key)


def read_traces(directory):
    files = chain_files(directory)
    if not files:
        raise FileNotFoundError(f"no chain_*.csv files in {directory}")
    return [read_trace(p, i) for i, p in enumerate(files)]


def write_long_csv(rows, path):
    """Long format ``parameter,cut_point_or_lag,value``."""
    rows = list(rows)
    _check_names([r[0] for r in rows])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("parameter,cut_point_or_lag,value\n")
        for name, k, v in rows:
            fh.write(f"{name},{k},{_fmt(v)}\n")


# datasets ----------------------------------------------------------------------------------

def _save(path, arr):
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    with open(path, "w", encoding="utf-8") as fh:
        for row in arr.tolist():
            fh.write(",".join("" if v != v else repr(v) for v in row) + "\n")


def _load(path):
    with open(path, encoding="utf-8") as fh:
        rows = [[float(v) if v else np.nan for v in line.rstrip("\n").split(",")]
                for line in fh if line.strip()]
    return np.array(rows, dtype=np.float64)


def write_dataset(data, directory):
    """Write a Gaussian or GEV dataset as headerless CSV matrices."""
    from .scenarios import GaussianDataset

    os.makedirs(directory, exist_ok=True)
    _save(os.path.join(directory, "y.csv"), data.y)
    if isinstance(data, GaussianDataset):
        kind = "gaussian"
        _save(os.path.join(directory, "sites.csv"), data.sites)
        _save(os.path.join(directory, "x_mu.csv"), data.x_mu)
        _save(os.path.join(directory, "x_tau.csv"), data.x_tau)
    else:
        kind = "gev"
        J, M, p = data.x.shape
        if p:
            _save(os.path.join(directory, "x.csv"), data.x.reshape(J * M, p))
    truth = {k: np.asarray(v).tolist() for k, v in data.truth.items()}
    with open(os.path.join(directory, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump({"scenario": kind, "truth": truth}, fh, sort_keys=True)


def read_dataset(directory):
    from .scenarios import MONTHS, GaussianDataset, GevDataset

    with open(os.path.join(directory, "truth.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    truth = {k: np.asarray(v) for k, v in meta["truth"].items()}
    y = _load(os.path.join(directory, "y.csv"))
    if meta["scenario"] == "gaussian":
        sites = _load(os.path.join(directory, "sites.csv"))
        x_mu = _load(os.path.join(directory, "x_mu.csv"))
        x_tau = _load(os.path.join(directory, "x_tau.csv"))
        return GaussianDataset(sites, x_mu, x_tau, y, truth)
    J = y.shape[0] // MONTHS
    path = os.path.join(directory, "x.csv")
    x = _load(path) if os.path.exists(path) else np.zeros((J * MONTHS, 0))
    return GevDataset(x.reshape(J, MONTHS, -1), y, truth)
