"""Streaming-update and full-update workloads with recall/TPS/QPS/P99 reporting."""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, IndexConfig
from .datasets import DatasetSpec, Ordering, cached_ground_truth, ground_truth, make_batches, read_fvecs
from .engine import UpdatableIndex
from .rebalance import distribution
from .search import compute_recall, knn_search

logger = logging.getLogger(__name__)

CSV_HEADER = ["batch", "recall", "tps", "qps", "p99_ms", "mem_bytes"]


@dataclass
class AblationFlags:
    fine_grained_control: bool = True
    balance_detector: bool = True


@dataclass
class WorkloadReport:
    batch: int
    recall: float
    tps: float
    qps: float
    p99_ms: float
    mem_bytes: int = 0
    live_vectors: int = 0
    postings: int = 0
    small_postings: int = 0
    jobs: int = 0
    posting_sizes: list = field(default_factory=list, repr=False)


@dataclass
class Workload:
    """In-memory dataset plus how to cut it into an initial set and batches."""

    base: np.ndarray
    queries: np.ndarray
    initial_fraction: float = 0.5
    batch_count: int = 10
    ordering: Ordering = Ordering.GAUSSIAN
    seed: int = 0

    @classmethod
    def from_spec(cls, spec: DatasetSpec, ordering=Ordering.GAUSSIAN, seed=0, limit=None):
        base = read_fvecs(spec.base_path)
        queries = read_fvecs(spec.query_path)
        if limit is not None:
            base = base[:limit]
        if spec.dimension is not None and base.shape[1] != spec.dimension:
            raise ConfigError(f"base vectors have dimension {base.shape[1]}, expected {spec.dimension}")
        return cls(base, queries, spec.initial_fraction, spec.batch_count, Ordering(ordering), seed)


@dataclass
class RunOptions:
    deterministic: bool = False
    concurrent_search: bool = True
    store_dir: str | None = None
    io_delay: float = 0.0
    gt_cache: str | None = None
    eval_repeats: int = 1
    # Measure recall while the queue may still hold jobs instead of after drain.
    measure_concurrently: bool = False
    # Precomputed ground truth for run_full (rows per query, over every vector).
    truth: np.ndarray | None = None


def resident_memory() -> int:
    """Resident set size in bytes, or 0 where /proc is unavailable."""
    try:
        with open("/proc/self/statm") as fh:
            return int(fh.read().split()[1]) * os.sysconf("SC_PAGE_SIZE")
    except (OSError, ValueError, IndexError):
        return 0


def p99(latencies) -> float:
    """Nearest-rank 99th percentile."""
    if not len(latencies):
        return 0.0
    ordered = sorted(latencies)
    return ordered[max(1, math.ceil(0.99 * len(ordered))) - 1]


def _validate(workload: Workload, config: IndexConfig):
    if workload.base.ndim != 2 or workload.base.shape[1] != config.dimension:
        raise ConfigError(f"base dimension {workload.base.shape[1:]} != config dimension {config.dimension}")
    if workload.queries.ndim != 2 or workload.queries.shape[1] != config.dimension:
        raise ConfigError("query dimension does not match the index")
    n_initial = int(round(workload.base.shape[0] * workload.initial_fraction))
    if config.k > n_initial:
        raise ConfigError(f"k={config.k} exceeds the initial vector count {n_initial}")


def build_index(workload: Workload, config: IndexConfig, flags: AblationFlags, options: RunOptions):
    initial, batches = make_batches(workload.base, workload.initial_fraction, workload.batch_count,
                                    workload.ordering, workload.seed)
    kwargs = dict(fine_grained=flags.fine_grained_control, balance_detector=flags.balance_detector)
    if options.store_dir is not None:
        index = UpdatableIndex.create(options.store_dir, config, io_delay=options.io_delay, **kwargs)
    else:
        index = UpdatableIndex(config, **kwargs)
    index.bulk_load(workload.base[initial], initial)
    if not options.deterministic:
        index.start()
    index.drain()
    return index, initial, batches


def _feed(index: UpdatableIndex, ids, vectors, config: IndexConfig, options: RunOptions, queries):
    if options.deterministic:
        for vid, v in zip(ids, vectors):
            index.insert(int(vid), v)
            index.run_pending()
        return
    done = threading.Event()

    def background_search(offset):
        i = offset
        while not done.is_set():
            knn_search(index, queries[i % len(queries)])
            i += config.search_threads

    searchers = []
    if options.concurrent_search and len(queries):
        searchers = [threading.Thread(target=background_search, args=(t,), daemon=True)
                     for t in range(config.search_threads)]
        for t in searchers:
            t.start()
    chunks = np.array_split(np.arange(len(ids)), config.fg_threads)

    def inserter(rows):
        for r in rows:
            index.insert(int(ids[r]), vectors[r])

    try:
        with ThreadPoolExecutor(config.fg_threads) as pool:
            for fut in [pool.submit(inserter, rows) for rows in chunks]:
                fut.result()
    finally:
        done.set()
        for t in searchers:
            t.join()


def evaluate(index: UpdatableIndex, queries, truth, config: IndexConfig, deterministic=False,
             repeats: int = 1):
    """Run every query; returns (mean recall, qps, p99 ms, raw results).

    With ``repeats`` > 1 the fastest pass is kept for QPS and P99.
    """
    n = len(queries)
    threads = 1 if deterministic else config.search_threads
    best = None
    for _ in range(max(1, repeats)):
        results = [None] * n
        latencies = [0.0] * n

        def run(rows):
            for r in rows:
                t0 = time.perf_counter()
                results[r] = knn_search(index, queries[r], config.k)
                latencies[r] = (time.perf_counter() - t0) * 1000.0

        start = time.perf_counter()
        if threads == 1:
            run(range(n))
        else:
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(run, np.array_split(np.arange(n), threads)))
        wall = time.perf_counter() - start
        if best is None or wall < best[0]:
            best = (wall, results, latencies)
    wall, results, latencies = best
    recall = float(np.mean([compute_recall(results[r], truth[r]) for r in range(n)])) if n else 1.0
    return recall, (n / wall if wall > 0 else 0.0), p99(latencies), results


def _report(index, batch, recall, tps, qps, p99_ms, jobs, live):
    sizes = [n for _, n, _ in distribution(index)]
    small = sum(1 for s in sizes if s < index.config.merge_threshold)
    return WorkloadReport(batch, recall, tps, qps, p99_ms, resident_memory(), live, len(sizes), small,
                          jobs, sorted(sizes))


def _truth(workload, live, k, batch, options):
    if options.gt_cache:
        return cached_ground_truth(options.gt_cache, workload.base, live, workload.queries, k, batch)
    return ground_truth(workload.base, live, workload.queries, k)


def run_streaming(workload: Workload, config: IndexConfig, flags: AblationFlags | None = None,
                  options: RunOptions | None = None, index_out: list | None = None) -> list[WorkloadReport]:
    """Feed the batches one by one; after each drains, measure recall, TPS, QPS, P99."""
    flags = flags or AblationFlags()
    options = options or RunOptions()
    _validate(workload, config)
    index, initial, batches = build_index(workload, config, flags, options)
    live = list(initial)
    reports = []
    try:
        for batch in batches:
            before = index.stats.jobs_completed(index.stats.snapshot())
            start = time.perf_counter()
            _feed(index, batch.ids, batch.vectors, config, options, workload.queries)
            live.extend(int(i) for i in batch.ids)
            truth = _truth(workload, live, config.k, batch.index, options)
            if options.measure_concurrently:
                recall, qps, p99_ms, _ = evaluate(index, workload.queries, truth, config,
                                                  options.deterministic, options.eval_repeats)
            index.drain()
            elapsed = time.perf_counter() - start
            jobs = index.stats.jobs_completed(index.stats.snapshot()) - before
            if not options.measure_concurrently:
                recall, qps, p99_ms, _ = evaluate(index, workload.queries, truth, config,
                                                  options.deterministic, options.eval_repeats)
            reports.append(_report(index, batch.index, recall, jobs / elapsed if elapsed > 0 else 0.0,
                                   qps, p99_ms, jobs, len(live)))
            logger.info("batch %d recall=%.4f tps=%.1f qps=%.1f", batch.index, recall, reports[-1].tps, qps)
    finally:
        if index_out is not None:
            index_out.append(index)
        else:
            index.close()
    return reports


def run_full(workload: Workload, config: IndexConfig, flags: AblationFlags | None = None,
             options: RunOptions | None = None) -> WorkloadReport:
    """Append every fresh vector in one stream, then search once everything settled."""
    flags = flags or AblationFlags()
    options = options or RunOptions()
    _validate(workload, config)
    given = None
    if options.truth is not None:
        given = np.asarray(options.truth)[:, :config.k]
        if given.shape != (len(workload.queries), config.k):
            raise ConfigError(f"ground truth shape {given.shape} does not cover the queries at k={config.k}")
    index, initial, batches = build_index(workload, config, flags, options)
    try:
        ids = np.concatenate([b.ids for b in batches])
        vectors = workload.base[ids]
        start = time.perf_counter()
        _feed(index, ids, vectors, config, RunOptions(options.deterministic, concurrent_search=False),
              workload.queries)
        index.drain()
        elapsed = time.perf_counter() - start
        jobs = index.stats.jobs_completed(index.stats.snapshot())
        live = np.concatenate([initial, ids])
        truth = given if given is not None else _truth(workload, live, config.k, 0, options)
        recall, qps, p99_ms, _ = evaluate(index, workload.queries, truth, config, options.deterministic,
                                          options.eval_repeats)
        return _report(index, 1, recall, jobs / elapsed if elapsed > 0 else 0.0, qps, p99_ms, jobs, live.size)
    finally:
        index.close()


def contention_benchmark(config: IndexConfig, flags: AblationFlags, n_vectors: int = 2000,
                         inserters: int = 4, n_initial: int = 100, io_delay: float = 0.002,
                         seed: int = 0, store_dir: str | None = None) -> dict:
    """TPS of several inserter threads hammering a small index that splits constantly.

    All vectors come from one Gaussian blob, so every inserter lands on the
    same handful of postings. The file-backed store sleeps ``io_delay``
    seconds per blob write to stand in for device latency; without it a
    single interpreter thread does all the work and there is nothing for
    finer locking to overlap.
    """
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(n_initial + n_vectors, config.dimension)).astype(np.float32)
    tmp = None
    if store_dir is None:
        tmp = tempfile.TemporaryDirectory()
        store_dir = tmp.name
    index = UpdatableIndex.create(store_dir, config, io_delay=io_delay,
                                  fine_grained=flags.fine_grained_control,
                                  balance_detector=flags.balance_detector)
    try:
        index.bulk_load(data[:n_initial], np.arange(n_initial))
        index.start()
        index.drain()
        before = index.stats.jobs_completed(index.stats.snapshot())
        ids = np.arange(n_initial, n_initial + n_vectors)
        chunks = np.array_split(ids, inserters)

        def inserter(rows):
            for vid in rows:
                index.insert(int(vid), data[vid])

        start = time.perf_counter()
        with ThreadPoolExecutor(inserters) as pool:
            for fut in [pool.submit(inserter, c) for c in chunks]:
                fut.result()
        index.drain()
        elapsed = time.perf_counter() - start
        stats = index.stats.snapshot()
        jobs = index.stats.jobs_completed(stats) - before
        return {"tps": jobs / elapsed, "jobs": jobs, "seconds": elapsed, "stats": stats}
    finally:
        index.close()
        if tmp is not None:
            tmp.cleanup()


def report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow([r.batch, f"{r.recall:.6f}", f"{r.tps:.3f}", f"{r.qps:.3f}", f"{r.p99_ms:.3f}",
                        int(r.mem_bytes)])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"batch": int(r["batch"]), "recall": float(r["recall"]), "tps": float(r["tps"]),
             "qps": float(r["qps"]), "p99_ms": float(r["p99_ms"]), "mem_bytes": int(r["mem_bytes"])}
            for r in rows]
