import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from balanced_ivf import IndexConfig, UpdatableIndex

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def blobs(n, d, n_centres=8, spread=1.0, scale=6.0, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_centres, d)) * scale
    return (centres[rng.integers(0, n_centres, n)] + rng.normal(size=(n, d)) * spread).astype(np.float32)


def brute_knn(points, ids, q, k):
    """Plain-Python exhaustive scan: sort (distance, id) pairs."""
    scored = []
    for vid, p in zip(ids, points):
        s = 0.0
        for a, b in zip(p.tolist(), q.tolist()):
            s += (a - b) * (a - b)
        scored.append((math.sqrt(s), int(vid)))
    scored.sort()
    return scored[:k]


@pytest.fixture
def small_index():
    """Deterministic in-memory index over 600 vectors in 8 dimensions."""
    X = blobs(600, 8, seed=1)
    index = UpdatableIndex(IndexConfig(dimension=8, split_threshold=40, merge_threshold=5))
    index.bulk_load(X)
    index.drain()
    yield index, X
    index.close()


def manual_index(groups, config, first_vid=0, **kwargs):
    """Index whose postings are exactly ``groups`` (arrays of vectors), centroids = means.

    Returns (index, pids, vids_per_group).
    """
    from balanced_ivf.store import Records

    index = UpdatableIndex(config, **kwargs)
    pids, vid_groups = [], []
    vid = first_vid
    for X in groups:
        X = np.asarray(X, dtype=np.float32).reshape(-1, config.dimension)
        vids = np.arange(vid, vid + X.shape[0])
        vid += X.shape[0]
        for v in vids:
            index.versions.register(int(v))
        centroid = X.astype(np.float64).mean(axis=0) if len(X) else np.zeros(config.dimension)
        pid = index.new_posting(Records.of(vids, np.zeros(len(vids)), X), centroid.astype(np.float32))
        pids.append(pid)
        vid_groups.append(vids)
    index.recorder.commit_structural(pids)
    return index, pids, vid_groups


# (criterion number, verdict line) collected by the acceptance suite.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
