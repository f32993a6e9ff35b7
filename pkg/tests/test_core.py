import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from balanced_ivf.core import ConfigError, IndexConfig, UsageError, distance, squared_distances

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)


def scalar_distance(p, q):
    return math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(p, q)))


def test_identity_and_345():
    x = np.array([1.5, -2.0, 7.25], dtype=np.float32)
    assert distance(x, x) == 0.0
    assert distance([0, 0], [3, 4]) == 5.0


def test_symmetry_against_scalar_reference():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, q = rng.normal(size=(2, 16)).astype(np.float32)
        assert distance(p, q) == distance(q, p)
        assert distance(p, q) == pytest.approx(scalar_distance(p, q), rel=1e-6)


@given(st.lists(st.tuples(finite, finite, finite), min_size=3, max_size=3))
def test_triangle_inequality(points):
    a, b, c = (np.array(p, dtype=np.float32) for p in points)
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-5 * max(1.0, distance(a, c))


@given(st.integers(1, 6), st.data())
def test_zero_iff_equal(d, data):
    p = np.array(data.draw(st.lists(finite, min_size=d, max_size=d)), dtype=np.float32)
    q = np.array(data.draw(st.lists(finite, min_size=d, max_size=d)), dtype=np.float32)
    assert (distance(p, q) == 0.0) == bool(np.array_equal(p, q))


@pytest.mark.parametrize("accumulate64", [False, True])
def test_blocked_distances_match_scalar_loop_768d(accumulate64):
    rng = np.random.default_rng(3)
    points = rng.normal(size=(20, 768)).astype(np.float32)
    q = rng.normal(size=768).astype(np.float32)
    got = np.sqrt(squared_distances(points, q, accumulate64))
    want = [scalar_distance(p, q) for p in points]
    np.testing.assert_allclose(got, want, rtol=1e-4)


def test_dimension_mismatch_is_usage_error():
    with pytest.raises(UsageError):
        distance([1.0, 2.0], [1.0, 2.0, 3.0])


def test_config_defaults():
    cfg = IndexConfig(dimension=4)
    assert (cfg.split_threshold, cfg.merge_threshold, cfg.balance_factor) == (80, 10, 0.15)
    assert (cfg.search_postings, cfg.k) == (32, 10)
    assert (cfg.fg_threads, cfg.bg_threads, cfg.search_threads) == (1, 4, 4)
    assert cfg.detector_period == 0.1


@pytest.mark.parametrize("changes", [
    {"balance_factor": 0.5}, {"balance_factor": 0.0}, {"balance_factor": 0.6},
    {"merge_threshold": 80}, {"dimension": 0}, {"split_threshold": 0}, {"bg_threads": 0},
])
def test_config_invariants(changes):
    with pytest.raises(ConfigError):
        IndexConfig(**{"dimension": 4, **changes})
