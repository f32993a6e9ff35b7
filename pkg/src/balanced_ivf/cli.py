"""Command-line entry point: build, stream, full, search, dump-distribution.

Relative input paths are resolved against ``$BALANCED_IVF_DATA`` when set.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import ConfigError, FormatError, IndexConfig, UsageError
from .datasets import Ordering, read_fvecs, read_ivecs
from .engine import UpdatableIndex
from .harness import AblationFlags, RunOptions, Workload, report_csv, run_full, run_streaming
from .rebalance import write_distribution
from .search import knn_search

DATA_ENV = "BALANCED_IVF_DATA"

# IndexConfig fields exposed as flags.
CONFIG_FLAGS = ("split_threshold", "merge_threshold", "balance_factor", "search_postings", "k",
                "fg_threads", "bg_threads", "search_threads", "detector_period", "seed")
HARNESS_DEFAULTS = {"batches": 10, "initial_fraction": 0.5, "ordering": "gaussian", "limit": None}

_DEFAULTS = {f.name: f.default for f in dataclasses.fields(IndexConfig)}
_TYPES = {"split_threshold": int, "merge_threshold": int, "balance_factor": float, "search_postings": int,
          "k": int, "fg_threads": int, "bg_threads": int, "search_threads": int, "detector_period": float,
          "seed": int, "batches": int, "initial_fraction": float, "ordering": str, "limit": int}
_HELP = {
    "split_threshold": "posting length that triggers a split (l_max)",
    "merge_threshold": "posting length below which a posting is merged (l_min)",
    "balance_factor": "smallest share the minor side of a split may keep, in (0, 0.5)",
    "search_postings": "postings scanned per query",
    "k": "neighbours per query",
    "fg_threads": "foreground inserter threads",
    "bg_threads": "background update workers",
    "search_threads": "query threads",
    "detector_period": "seconds between balance detector scans",
    "seed": "random seed",
    "batches": "number of streaming batches",
    "initial_fraction": "share of the base set used for the initial build",
    "ordering": "batch ordering: gaussian or file",
    "limit": "use only the first N base vectors",
}


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: error: {message}")


def _add_option(p, name):
    default = _DEFAULTS.get(name, HARNESS_DEFAULTS.get(name))
    p.add_argument("--" + name.replace("_", "-"), dest=name, type=_TYPES[name], default=None,
                   help=f"{_HELP[name]} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="balanced-ivf", description="Updatable balanced cluster ANN index.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, harness=False):
        p.add_argument("--config", help="key=value file; flags override it")
        for name in CONFIG_FLAGS:
            _add_option(p, name)
        if harness:
            for name in ("batches", "initial_fraction", "ordering", "limit"):
                _add_option(p, name)
            p.add_argument("--no-detector", action="store_true",
                           help="disable the balance detector (default: enabled)")
            p.add_argument("--coarse-locks", action="store_true",
                           help="hold a per-posting lock for whole updates (default: fine-grained)")
            p.add_argument("--deterministic", action="store_true",
                           help="single-threaded reproducible mode (default: off)")
            p.add_argument("--gt-cache", help="directory caching ground truth (default: none)")
            p.add_argument("--store-dir", help="keep postings on disk here (default: in memory)")

    p = sub.add_parser("build", help="build and persist an index from a base file")
    p.add_argument("--base", required=True, help="base vectors (.fvecs)")
    p.add_argument("--out", required=True, help="index directory")
    _add_option(p, "limit")
    common(p)

    for name, what in (("stream", "streaming update workload, one CSV row per batch"),
                       ("full", "full update workload, one CSV row")):
        p = sub.add_parser(name, help=what)
        p.add_argument("--base", required=True, help="base vectors (.fvecs)")
        p.add_argument("--queries", required=True, help="query vectors (.fvecs)")
        p.add_argument("--truth", help="precomputed ground truth (.ivecs) over the whole base (full only)")
        p.add_argument("--out", required=True, help="report CSV path")
        p.add_argument("--concurrent-measure", action="store_true",
                       help="measure recall before the update queue drains (default: off)")
        common(p, harness=True)

    p = sub.add_parser("search", help="answer queries against a built index")
    p.add_argument("--index", required=True, help="index directory")
    p.add_argument("--queries", required=True, help="query vectors (.fvecs)")
    p.add_argument("--out", help="CSV of query,rank,vid,distance (default: stdout)")
    _add_option(p, "k")
    _add_option(p, "search_postings")

    p = sub.add_parser("dump-distribution", help="write pid,live_length,status for every posting")
    p.add_argument("--index", required=True, help="index directory")
    p.add_argument("--out", required=True, help="CSV path")
    return parser


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _TYPES[key](value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return values


def resolve(path) -> str:
    p = Path(path)
    data_dir = os.environ.get(DATA_ENV)
    if data_dir and not p.is_absolute() and not p.exists():
        p = Path(data_dir) / p
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return str(p)


def settings(args, dimension: int):
    """Merge defaults, the --config file and explicit flags; returns (IndexConfig, harness dict)."""
    merged = dict(HARNESS_DEFAULTS)
    merged.update({k: v for k, v in _DEFAULTS.items() if k in CONFIG_FLAGS})
    if getattr(args, "config", None):
        merged.update(read_config_file(resolve(args.config)))
    for key in _TYPES:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    config = IndexConfig(dimension=dimension, **{k: merged[k] for k in CONFIG_FLAGS})
    return config, merged


def _cmd_build(args):
    base = read_fvecs(resolve(args.base))
    config, extra = settings(args, base.shape[1])
    if extra["limit"]:
        base = base[:extra["limit"]]
    index = UpdatableIndex.create(args.out, config)
    try:
        index.bulk_load(base)
        index.drain()
        print(f"built {len(index.alive_pids())} postings over {base.shape[0]} vectors in {args.out}")
    finally:
        index.close()


def _workload(args):
    base = read_fvecs(resolve(args.base))
    queries = read_fvecs(resolve(args.queries))
    config, extra = settings(args, base.shape[1])
    if extra["limit"]:
        base = base[:extra["limit"]]
    try:
        ordering = Ordering(extra["ordering"])
    except ValueError:
        raise ConfigError(f"unknown ordering {extra['ordering']!r}") from None
    workload = Workload(base, queries, extra["initial_fraction"], extra["batches"], ordering, config.seed)
    flags = AblationFlags(fine_grained_control=not args.coarse_locks, balance_detector=not args.no_detector)
    if args.deterministic:
        config = config.replace(fg_threads=1, search_threads=1)
    options = RunOptions(deterministic=args.deterministic, store_dir=args.store_dir, gt_cache=args.gt_cache,
                         measure_concurrently=args.concurrent_measure)
    return workload, config, flags, options


def _cmd_stream(args):
    workload, config, flags, options = _workload(args)
    reports = run_streaming(workload, config, flags, options)
    report_csv(reports, args.out)
    print(f"wrote {len(reports)} batch reports to {args.out}")


def _cmd_full(args):
    workload, config, flags, options = _workload(args)
    if args.truth:
        options.truth = read_ivecs(resolve(args.truth))
    report = run_full(workload, config, flags, options)
    report_csv([report], args.out)
    print(f"recall={report.recall:.4f} tps={report.tps:.1f} qps={report.qps:.1f} p99_ms={report.p99_ms:.2f}")


def _open(args):
    directory = Path(args.index)
    if not (directory / "manifest").exists():
        raise UsageError(f"no index at {args.index}")
    return UpdatableIndex.open(directory)


def _cmd_search(args):
    queries = read_fvecs(resolve(args.queries))
    index = _open(args)
    try:
        k = args.k or index.config.k
        m = args.search_postings or index.config.search_postings
        out = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            w = csv.writer(out)
            w.writerow(["query", "rank", "vid", "distance"])
            for qi, q in enumerate(queries):
                for rank, (vid, d) in enumerate(knn_search(index, q, k, m).neighbors):
                    w.writerow([qi, rank, vid, f"{d:.6f}"])
        finally:
            if out is not sys.stdout:
                out.close()
    finally:
        index.close()


def _cmd_dump(args):
    index = _open(args)
    try:
        write_distribution(index, args.out)
    finally:
        index.close()


COMMANDS = {"build": _cmd_build, "stream": _cmd_stream, "full": _cmd_full, "search": _cmd_search,
            "dump-distribution": _cmd_dump}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
