import csv
import dataclasses

import numpy as np
import pytest

from balanced_ivf import IndexConfig
from balanced_ivf.cli import build_parser, main, read_config_file
from balanced_ivf.core import ConfigError
from balanced_ivf.datasets import ground_truth, sift_like, write_fvecs, write_ivecs
from balanced_ivf.harness import read_report_csv


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    base, queries = sift_like(1200, 20, dimension=16, seed=0)
    write_fvecs(root / "base.fvecs", base)
    write_fvecs(root / "q.fvecs", queries)
    write_ivecs(root / "gt.ivecs", ground_truth(base, np.arange(1200), queries, 10).astype(np.int32))
    return root, base, queries


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag(capsys):
    assert main(["stream", "--base", "b", "--queries", "q", "--out", "o", "--bogus"]) == 1
    assert "unrecognized" in capsys.readouterr().err


def test_balance_factor_rejected(data, tmp_path, capsys):
    root, _, _ = data
    rc = main(["stream", "--base", str(root / "base.fvecs"), "--queries", str(root / "q.fvecs"),
               "--balance-factor", "0.6", "--out", str(tmp_path / "r.csv")])
    assert rc == 1
    assert "balance_factor" in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    rc = main(["build", "--base", str(tmp_path / "nope.fvecs"), "--out", str(tmp_path / "idx")])
    assert rc == 1
    assert "nope.fvecs" in capsys.readouterr().err


def test_malformed_file_is_runtime_error(tmp_path):
    (tmp_path / "bad.fvecs").write_bytes(b"\x03\x00\x00\x00\x00\x00")
    assert main(["build", "--base", str(tmp_path / "bad.fvecs"), "--out", str(tmp_path / "idx")]) == 2


def test_help_lists_defaults_matching_config():
    parser = build_parser()
    stream = parser._subparsers._group_actions[0].choices["stream"]
    defaults = {f.name: f.default for f in dataclasses.fields(IndexConfig)}
    options = {a.dest: a for a in stream._actions}
    for name in ("split_threshold", "merge_threshold", "balance_factor", "search_postings", "k",
                 "fg_threads", "bg_threads", "search_threads"):
        assert f"(default: {defaults[name]})" in options[name].help
    assert (defaults["split_threshold"], defaults["merge_threshold"], defaults["balance_factor"],
            defaults["search_postings"]) == (80, 10, 0.15, 32)


def test_stream_writes_one_row_per_batch(data, tmp_path):
    root, _, _ = data
    out = tmp_path / "report.csv"
    rc = main(["stream", "--base", str(root / "base.fvecs"), "--queries", str(root / "q.fvecs"),
               "--batches", "10", "--split-threshold", "80", "--merge-threshold", "10",
               "--balance-factor", "0.15", "--search-postings", "32", "--fg-threads", "1",
               "--bg-threads", "4", "--search-threads", "4", "--out", str(out)])
    assert rc == 0
    rows = read_report_csv(out)
    assert [r["batch"] for r in rows] == list(range(1, 11))
    assert all(r["recall"] > 0.8 for r in rows)


def test_full_with_truth_file(data, tmp_path, monkeypatch):
    root, _, _ = data
    out = tmp_path / "full.csv"
    rc = main(["full", "--base", "base.fvecs", "--queries", "q.fvecs", "--truth", "gt.ivecs",
               "--deterministic", "--out", str(out)])
    # Relative names only resolve through the data directory variable.
    assert rc == 1
    monkeypatch.setenv("BALANCED_IVF_DATA", str(root))
    rc = main(["full", "--base", "base.fvecs", "--queries", "q.fvecs", "--truth", "gt.ivecs",
               "--deterministic", "--out", str(out)])
    assert rc == 0
    (row,) = read_report_csv(out)
    assert row["recall"] > 0.85


def test_config_file_and_flag_override(data, tmp_path):
    root, _, _ = data
    conf = tmp_path / "run.conf"
    conf.write_text("# experiment\nsplit-threshold = 60\nbatches=4\nseed=3\n")
    assert read_config_file(conf) == {"split_threshold": 60, "batches": 4, "seed": 3}
    out = tmp_path / "r.csv"
    rc = main(["stream", "--config", str(conf), "--batches", "3", "--deterministic", "--base",
               str(root / "base.fvecs"), "--queries", str(root / "q.fvecs"), "--out", str(out)])
    assert rc == 0
    assert len(read_report_csv(out)) == 3


def test_bad_config_file(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("nonsense_key = 4\n")
    with pytest.raises(ConfigError):
        read_config_file(conf)
    conf.write_text("split_threshold = many\n")
    with pytest.raises(ConfigError):
        read_config_file(conf)


def test_build_search_dump(data, tmp_path, capsys):
    root, base, queries = data
    idx = tmp_path / "idx"
    assert main(["build", "--base", str(root / "base.fvecs"), "--out", str(idx)]) == 0
    hits = tmp_path / "hits.csv"
    assert main(["search", "--index", str(idx), "--queries", str(root / "q.fvecs"), "--k", "5",
                 "--out", str(hits)]) == 0
    rows = list(csv.DictReader(hits.open()))
    assert len(rows) == 5 * len(queries)
    first = [int(r["vid"]) for r in rows if r["query"] == "0"]
    truth = ground_truth(base, np.arange(len(base)), queries[:1], 5)[0].tolist()
    assert len(set(first) & set(truth)) >= 4
    dist = tmp_path / "dist.csv"
    assert main(["dump-distribution", "--index", str(idx), "--out", str(dist)]) == 0
    table = list(csv.DictReader(dist.open()))
    assert sum(int(r["live_length"]) for r in table) == len(base)
    assert all(int(r["live_length"]) <= 80 for r in table)


def test_search_without_index(tmp_path, data):
    root, _, _ = data
    assert main(["search", "--index", str(tmp_path), "--queries", str(root / "q.fvecs")]) == 1
