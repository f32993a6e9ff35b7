import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from balanced_ivf import IndexConfig, compute_recall
from balanced_ivf.core import ConfigError
from balanced_ivf.datasets import DatasetSpec, ground_truth, sift_like, write_fvecs
from balanced_ivf.harness import (AblationFlags, RunOptions, Workload, WorkloadReport, evaluate, p99,
                                  read_report_csv, report_csv, run_full, run_streaming)

from conftest import blobs


def small_workload(n=1000, d=8, seed=0):
    X = blobs(n + 40, d, seed=seed)
    return Workload(X[:n], X[n:], initial_fraction=0.5, batch_count=10, seed=seed)


def small_config(d=8, **kw):
    return IndexConfig(dimension=d, split_threshold=30, merge_threshold=4, search_postings=8,
                       bg_threads=2, search_threads=2, **kw)


def test_streaming_reports_and_conservation():
    reports = run_streaming(small_workload(), small_config(), options=RunOptions(deterministic=True))
    assert [r.batch for r in reports] == list(range(1, 11))
    assert [r.live_vectors for r in reports] == [500 + 50 * j for j in range(1, 11)]
    for r in reports:
        assert 0.0 <= r.recall <= 1.0 and r.tps >= 0 and r.qps >= 0 and r.p99_ms >= 0
        assert sum(r.posting_sizes) == r.live_vectors
        assert r.jobs >= 50


def test_threaded_streaming_conserves():
    holder = []
    reports = run_streaming(small_workload(seed=1), small_config(fg_threads=2), index_out=holder)
    index = holder[0]
    try:
        counts = index.scan_live()
        assert len(counts) == 1000 and max(counts.values()) == 1
        assert reports[-1].recall > 0.8
    finally:
        index.close()


def test_deterministic_mode_repeats_exactly():
    opts = RunOptions(deterministic=True)
    a = run_streaming(small_workload(seed=2), small_config(), options=opts)
    b = run_streaming(small_workload(seed=2), small_config(), options=opts)
    assert [r.recall for r in a] == [r.recall for r in b]
    assert [r.posting_sizes for r in a] == [r.posting_sizes for r in b]


def test_harness_recall_matches_raw_results():
    wl = small_workload(seed=3)
    holder = []
    cfg = small_config()
    reports = run_streaming(wl, cfg, options=RunOptions(deterministic=True), index_out=holder)
    index = holder[0]
    try:
        truth = ground_truth(wl.base, np.arange(1000), wl.queries, cfg.k)
        recall, _, _, results = evaluate(index, wl.queries, truth, cfg, deterministic=True)
        assert recall == pytest.approx(reports[-1].recall)
        # Spot check a sample of queries against compute_recall by hand.
        for r in range(0, len(wl.queries), 7):
            hits = len(set(results[r].ids) & set(truth[r].tolist()))
            assert compute_recall(results[r], truth[r]) == hits / cfg.k
        assert recall == pytest.approx(np.mean([compute_recall(results[r], truth[r]) for r in range(40)]))
    finally:
        index.close()


def test_config_errors_before_any_work():
    wl = small_workload()
    with pytest.raises(ConfigError):
        run_streaming(wl, small_config(d=9))
    with pytest.raises(ConfigError):
        run_streaming(Workload(wl.base[:10], wl.queries, batch_count=10), small_config())
    with pytest.raises(ConfigError):
        run_full(wl, small_config(), options=RunOptions(truth=np.zeros((3, 10), np.int32)))


def test_run_full_smoke():
    base, queries = sift_like(2000, 30, dimension=32, seed=4)
    cfg = IndexConfig(dimension=32, bg_threads=2, search_threads=2)
    r = run_full(Workload(base, queries), cfg)
    assert r.batch == 1 and r.live_vectors == 2000
    assert r.recall >= 0.85 and r.tps > 0 and r.qps > 0 and r.p99_ms > 0
    given = ground_truth(base, np.arange(2000), queries, 10)
    again = run_full(Workload(base, queries), cfg, options=RunOptions(truth=given))
    assert again.recall >= 0.85


def test_ablation_flags_keep_correctness():
    flags = AblationFlags(fine_grained_control=False, balance_detector=False)
    holder = []
    run_streaming(small_workload(seed=5), small_config(), flags, index_out=holder)
    index = holder[0]
    try:
        counts = index.scan_live()
        assert len(counts) == 1000 and max(counts.values()) == 1
    finally:
        index.close()


def test_from_spec(tmp_path):
    base, queries = sift_like(200, 5, dimension=16, seed=6)
    write_fvecs(tmp_path / "b.fvecs", base)
    write_fvecs(tmp_path / "q.fvecs", queries)
    spec = DatasetSpec(str(tmp_path / "b.fvecs"), str(tmp_path / "q.fvecs"), dimension=16, batch_count=4)
    wl = Workload.from_spec(spec, limit=100)
    assert wl.base.shape == (100, 16) and wl.batch_count == 4
    with pytest.raises(ConfigError):
        Workload.from_spec(DatasetSpec(str(tmp_path / "b.fvecs"), str(tmp_path / "q.fvecs"), dimension=8))


def report(batch, recall=0.5, tps=1.0, qps=2.0, p99_ms=3.0, mem=4):
    return WorkloadReport(batch, recall, tps, qps, p99_ms, mem)


def test_csv_one_report(tmp_path):
    path = tmp_path / "r.csv"
    report_csv([report(1, 0.91234567, 1234.5, 99.25, 1.5, 1 << 20)], path)
    lines = path.read_text().splitlines()
    assert lines == ["batch,recall,tps,qps,p99_ms,mem_bytes", "1,0.912346,1234.500,99.250,1.500,1048576"]


def test_csv_empty(tmp_path):
    path = tmp_path / "r.csv"
    report_csv([], path)
    assert path.read_text().splitlines() == ["batch,recall,tps,qps,p99_ms,mem_bytes"]


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 1e4),
                          st.integers(0, 2**40)), max_size=12))
def test_csv_roundtrip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "r.csv"
    reports = [report(i + 1, *row) for i, row in enumerate(rows)]
    report_csv(reports, path)
    back = read_report_csv(path)
    assert [r["batch"] for r in back] == [r.batch for r in reports]
    for got, want in zip(back, reports):
        assert got["recall"] == pytest.approx(want.recall, abs=5e-7)
        assert got["tps"] == pytest.approx(want.tps, abs=5e-4)
        assert got["qps"] == pytest.approx(want.qps, abs=5e-4)
        assert got["p99_ms"] == pytest.approx(want.p99_ms, abs=5e-4)
        assert got["mem_bytes"] == want.mem_bytes
    # Formatting is deterministic: writing the parsed values again gives the same bytes.
    again = path.with_name("again.csv")
    report_csv([report(r["batch"], r["recall"], r["tps"], r["qps"], r["p99_ms"], r["mem_bytes"]) for r in back],
               again)
    assert again.read_bytes() == path.read_bytes()


def test_csv_unwritable(tmp_path):
    with pytest.raises(OSError):
        report_csv([], tmp_path / "missing" / "r.csv")


@pytest.mark.parametrize("sample,expected", [
    (list(range(1, 101)), 99),
    (list(range(1, 11)), 10),
    ([5.0], 5.0),
    ([], 0.0),
    (list(range(200, 0, -1)), 198),
])
def test_p99_nearest_rank(sample, expected):
    assert p99(sample) == expected


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=300))
def test_p99_is_a_sample_value_with_rank_bound(sample):
    v = p99(sample)
    assert v in sample
    assert sum(1 for x in sample if x <= v) >= math.ceil(0.99 * len(sample))
