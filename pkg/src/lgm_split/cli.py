"""Command-line front end: ``simulate``, ``run``, ``diagnose`` and ``bench``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

import argparse
from dataclasses import replace
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from .diagnostics import diagnose, mean_autocorrelation
from .estimator import make_proposal
from .exceptions import (
    ConfigError,
    DegenerateChains,
    HessianNotNegativeDefinite,
    ModeNotFound,
    NonConvergence,
    NotPositiveDefinite,
)
from .files import (
    RunConfig,
    TraceFormatError,
    read_config,
    read_dataset,
    read_traces,
    write_dataset,
    write_long_csv,
    write_trace,
)
from .sampler import ChainConfig, run_chains
from .scenarios import (
    GaussianDataset,
    GaussianScenario,
    GevScenario,
    build_gaussian_model,
    build_gev_model,
    make_gaussian_dataset,
    make_gev_dataset,
)

logger = logging.getLogger("lgm_split")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "LGM_SPLIT_THREADS"
NUMERIC_ERRORS = (NotPositiveDefinite, ModeNotFound, NonConvergence,
                  HessianNotNegativeDefinite, DegenerateChains, FloatingPointError)


# helpers ---------------------------------------------------------------------------

def build_id():
    """Package version and a digest of the installed sources."""
    from importlib import metadata

    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "0+unknown"
    h = hashlib.sha256()
    here = os.path.dirname(os.path.abspath(__file__))
    for name in sorted(os.listdir(here)):
        if name.endswith(".py"):
            with open(os.path.join(here, name), "rb") as fh:
                h.update(name.encode() + b"\0" + fh.read())
    return f"{version}+{h.hexdigest()[:12]}"


def resolve_threads(value):
    if value is not None:
        n = value
    else:
        raw = os.environ.get(THREADS_ENV)
        if raw is None or raw.strip() == "":
            return 1
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}", field="threads") from None
    if n < 1:
        raise ConfigError("must be at least 1", field="threads")
    return n


def load_config(args):
    """Config file (if any) with command-line overrides applied."""
    if args.config:
        config, lines = read_config(args.config)
    else:
        config, lines = RunConfig(), {}
    overrides = {
        "seed": args.seed, "chains": args.chains, "iterations": args.iters,
        "burnin": args.burnin, "out": args.out,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    config = replace(config, **overrides)
    return config.validate({k: v for k, v in lines.items() if k not in overrides})


def scenario_for(config):
    if config.scenario == "gaussian":
        return GaussianScenario(n_sites=config.sites, n_years=config.years,
                                rows=config.rows, cols=config.cols)
    return GevScenario(n_rivers=config.rivers, n_years=config.years, p=config.covariates)


def dataset_for(config, scenario):
    if config.data:
        data = read_dataset(config.data)
        if isinstance(data, GaussianDataset) != (config.scenario == "gaussian"):
            raise ConfigError("dataset does not belong to the configured scenario", field="data")
        return data
    seed = config.seed if config.data_seed is None else config.data_seed
    rng = np.random.default_rng(seed)
    if config.scenario == "gaussian":
        return make_gaussian_dataset(scenario, rng)
    return make_gev_dataset(scenario, rng)


def model_for(scenario, data):
    if isinstance(scenario, GaussianScenario):
        return build_gaussian_model(scenario, data)
    return build_gev_model(scenario, data)


def sample(config, model, threads, record=None):
    proposal, run_model = make_proposal(model, config.proposal, config.F, config.c)
    chain_config = ChainConfig(
        n_iter=config.iterations, burn_in=config.burnin, proposal=proposal,
        record=tuple(record or config.record), partitioned=config.partitioned,
        init_jitter=config.init_jitter,
    )
    return run_chains(run_model, chain_config, config.chains, config.seed, threads)


class Staging:
    """Write into a temporary sibling directory and move the files to ``out`` on success."""

    def __init__(self, out):
        self.out = os.path.abspath(out)

    def __enter__(self):
        parent = os.path.dirname(self.out)
        os.makedirs(parent, exist_ok=True)
        self.path = tempfile.mkdtemp(prefix=".staging-", dir=parent)
        return self.path

    def __exit__(self, kind, exc, tb):
        try:
            if kind is None:
                os.makedirs(self.out, exist_ok=True)
                for name in sorted(os.listdir(self.path)):
                    os.replace(os.path.join(self.path, name), os.path.join(self.out, name))
        finally:
            shutil.rmtree(self.path, ignore_errors=True)
        return False


def _require_out(config):
    if not config.out:
        raise ConfigError("an output directory is required (--out)", field="out")
    return config.out


def _json(obj):
    def default(x):
        if isinstance(x, np.generic):
            return x.item()
        if isinstance(x, np.ndarray):
            return x.tolist()
        raise TypeError(type(x).__name__)

    return json.dumps(obj, indent=2, sort_keys=True, default=default,
                      allow_nan=True) + "\n"


# subcommands -------------------------------------------------------------------------

def cmd_simulate(args):
    config = load_config(args)
    out = _require_out(config)
    scenario = scenario_for(config)
    data = dataset_for(replace(config, data=None), scenario)
    with Staging(out) as stage:
        write_dataset(data, stage)
    logger.info("dataset written to %s", out)
    return EXIT_OK


def cmd_run(args):
    config = load_config(args)
    out = _require_out(config)
    threads = resolve_threads(args.threads)
    scenario = scenario_for(config)
    data = dataset_for(config, scenario)
    model = model_for(scenario, data)
    start = time.perf_counter()
    traces = sample(config, model, threads)
    wall = time.perf_counter() - start
    with Staging(out) as stage:
        for i, t in enumerate(traces):
            write_trace(t, os.path.join(stage, f"chain_{i}.csv"))
        manifest = {
            "seed": config.seed,
            "config_sha256": config.digest(),
            "config": json.loads(config.canonical()),
            "build": build_id(),
            "wall_clock_seconds": wall,
            "threads": threads,
            "acceptance": [t.acceptance for t in traces],
        }
        with open(os.path.join(stage, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(_json(manifest))
    logger.info("%d chains written to %s in %.1f s", len(traces), out, wall)
    return EXIT_OK


def cmd_diagnose(args):
    source = args.traces or args.out
    if not source:
        raise ConfigError("a trace directory is required", field="traces")
    out = args.out or source
    if args.max_lag < 0:
        raise ConfigError("must be non-negative", field="max-lag")
    traces = read_traces(source)
    report = diagnose(traces, args.max_lag)
    with Staging(out) as stage:
        write_long_csv(report.gr_rows(), os.path.join(stage, "gelman_rubin.csv"))
        write_long_csv(report.acf_rows(), os.path.join(stage, "autocorrelation.csv"))
    worst = max(report.gelman_rubin.final().values())
    logger.info("largest final Gelman-Rubin statistic %.4f", worst)
    return EXIT_OK


def lattice_shape(nodes):
    """Near-square ``(rows, cols)`` with ``rows * cols == nodes``."""
    rows = int(math.isqrt(nodes))
    while nodes % rows:
        rows -= 1
    return rows, nodes // rows


def parse_sizes(text):
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}",
                          field="grid-sizes") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError("sizes must be positive", field="grid-sizes")
    return sizes


def bench_rows(config, sizes, threads, max_lag=50):
    """Run the Gaussian scenario once per lattice size on one shared dataset."""
    config = replace(config, scenario="gaussian")
    base = scenario_for(config)
    data = dataset_for(config, base)
    rows = []
    for nodes in sizes:
        r, c = lattice_shape(nodes)
        sc = replace(base, rows=r, cols=c)
        model = model_for(sc, data)
        start = time.perf_counter()
        traces = sample(config, model, threads, record=("theta",))
        wall = time.perf_counter() - start
        row = {"nodes": nodes, "rows": r, "cols": c}
        for name in model.theta_names:
            row[f"acf{max_lag}_{name}"] = float(mean_autocorrelation(traces, name, max_lag)[max_lag])
        row["data_rich_acceptance"] = float(np.mean([t.acceptance["data_rich"] for t in traces]))
        row["data_poor_acceptance"] = float(np.mean([t.acceptance["data_poor"] for t in traces]))
        row["wall_seconds"] = wall
        rows.append(row)
        logger.info("bench %d nodes done in %.1f s", nodes, wall)
    return rows


def cmd_bench(args):
    config = load_config(args)
    out = _require_out(config)
    threads = resolve_threads(args.threads)
    sizes = parse_sizes(args.grid_sizes)
    rows = bench_rows(config, sizes, threads, args.max_lag)
    with Staging(out) as stage:
        keys = list(rows[0])
        with open(os.path.join(stage, "bench.csv"), "w", encoding="utf-8") as fh:
            fh.write(",".join(keys) + "\n")
            for row in rows:
                fh.write(",".join(repr(row[k]) for k in keys) + "\n")
    return EXIT_OK


# entry point ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--chains", type=int, metavar="N")
    common.add_argument("--iters", type=int, metavar="N")
    common.add_argument("--burnin", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--threads", type=int, metavar="N",
                        help=f"worker processes (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lgm-split", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="simulate a dataset")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("run", parents=[common], help="run the chains")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("diagnose", parents=[common], help="Gelman-Rubin and autocorrelation")
    p.add_argument("traces", nargs="?", metavar="TRACE_DIR")
    p.add_argument("--max-lag", type=int, default=50, metavar="N")
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("bench", parents=[common], help="lattice scaling benchmark")
    p.add_argument("--grid-sizes", default="100,400,900", metavar="CSVLIST")
    p.add_argument("--max-lag", type=int, default=50, metavar="N")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TraceFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
