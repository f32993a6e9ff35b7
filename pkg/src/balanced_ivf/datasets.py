"""ANN benchmark files, update batches and exact ground truth."""

from __future__ import annotations

import enum
import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConfigError, FormatError


def _read_vecs(path, dtype) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw:
        return np.empty((0, 0), dtype=dtype)
    rows = []
    offset = 0
    dim = None
    size = len(raw)
    while offset < size:
        if offset + 4 > size:
            raise FormatError("truncated dimension header", offset)
        (d,) = np.frombuffer(raw, "<i4", 1, offset)
        d = int(d)
        if d <= 0 or (dim is not None and d != dim):
            raise FormatError(f"inconsistent dimension {d} (expected {dim})", offset)
        dim = d
        # Fast path: the rest of the file is uniform records of this dimension.
        stride = 4 * (d + 1)
        if offset == 0 and size % stride == 0:
            table = np.frombuffer(raw, "<i4").reshape(-1, d + 1)
            if np.all(table[:, 0] == d):
                return table[:, 1:].view(dtype).astype(dtype)
        end = offset + stride
        if end > size:
            raise FormatError(f"record of dimension {d} truncated", offset)
        rows.append(np.frombuffer(raw, dtype, d, offset + 4))
        offset = end
    return np.stack(rows).astype(dtype)


def read_fvecs(path) -> np.ndarray:
    """Records of ``i32 dim`` followed by ``dim`` little-endian f32."""
    return _read_vecs(path, np.dtype("<f4")).astype(np.float32)


def read_ivecs(path) -> np.ndarray:
    return _read_vecs(path, np.dtype("<i4")).astype(np.int32)


def _write_vecs(path, data, dtype):
    data = np.ascontiguousarray(data, dtype=dtype)
    if data.ndim != 2:
        raise ValueError("expected a 2-d array")
    n, d = data.shape
    table = np.empty((n, d + 1), dtype="<i4")
    table[:, 0] = d
    table[:, 1:] = data.view("<i4")
    Path(path).write_bytes(table.tobytes())


def write_fvecs(path, data) -> None:
    _write_vecs(path, data, "<f4")


def write_ivecs(path, data) -> None:
    _write_vecs(path, data, "<i4")


class Ordering(enum.Enum):
    FILE = "file"
    GAUSSIAN = "gaussian"


@dataclass
class DatasetSpec:
    base_path: str | None = None
    query_path: str | None = None
    truth_path: str | None = None
    dimension: int | None = None
    initial_fraction: float = 0.5
    batch_count: int = 10

    def __post_init__(self):
        if not 0.0 < self.initial_fraction < 1.0:
            raise ConfigError("initial_fraction must lie in (0, 1)")
        if self.batch_count < 1:
            raise ConfigError("batch_count must be positive")


@dataclass
class Batch:
    index: int
    ids: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return int(self.ids.shape[0])


def make_batches(base: np.ndarray, initial_fraction: float = 0.5, batch_count: int = 10,
                 ordering: Ordering = Ordering.FILE, seed: int = 0):
    """Split ``base`` into an initial set and ``batch_count`` update batches.

    ``GAUSSIAN`` draws a pseudo-timestamp per vector from a seeded normal
    distribution, sorts by it, and cuts the stream into equal-count ranges.
    Returns ``(initial_ids, batches)``; ids are row numbers in ``base``.
    """
    n = base.shape[0]
    n_initial = int(round(n * initial_fraction))
    if batch_count > n - n_initial:
        raise ConfigError(f"{batch_count} batches but only {n - n_initial} vectors to stream")
    if Ordering(ordering) is Ordering.GAUSSIAN:
        stamps = np.random.default_rng(seed).standard_normal(n)
        order = np.argsort(stamps, kind="stable")
    else:
        order = np.arange(n)
    initial = order[:n_initial]
    rest = order[n_initial:]
    bounds = np.linspace(0, rest.size, batch_count + 1).round().astype(int)
    batches = [Batch(j + 1, rest[bounds[j]:bounds[j + 1]], base[rest[bounds[j]:bounds[j + 1]]])
               for j in range(batch_count)]
    return initial, batches


def ground_truth(base: np.ndarray, live_ids, queries: np.ndarray, k: int) -> np.ndarray:
    """Exact k-NN ids over ``base[live_ids]``: ascending distance, ties by smaller id."""
    live_ids = np.asarray(live_ids, dtype=np.int64)
    if k > live_ids.size:
        raise ConfigError(f"k={k} exceeds the {live_ids.size} live vectors")
    order = np.argsort(live_ids, kind="stable")
    live_ids = live_ids[order]
    points = base[live_ids].astype(np.float64)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(1, points.size))
    for start in range(0, queries.shape[0], chunk):
        q = queries[start:start + chunk].astype(np.float64)
        diff = points[None, :, :] - q[:, None, :]
        d2 = np.einsum("qnd,qnd->qn", diff, diff)
        for row in range(d2.shape[0]):
            # Ids are sorted, so a stable sort on distance breaks ties by id.
            top = np.argsort(d2[row], kind="stable")[:k]
            out[start + row] = live_ids[top]
    return out


def cached_ground_truth(cache_dir, base, live_ids, queries, k, batch_index) -> np.ndarray:
    """:func:`ground_truth` memoised in an ivecs file keyed by data hash, batch and k."""
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(base).tobytes())
    h.update(np.ascontiguousarray(queries).tobytes())
    h.update(np.asarray(sorted(live_ids), dtype=np.int64).tobytes())
    path = Path(cache_dir) / f"gt_{h.hexdigest()[:16]}_b{batch_index}_k{k}.ivecs"
    if path.exists():
        return read_ivecs(path).astype(np.int64)
    truth = ground_truth(base, live_ids, queries, k)
    os.makedirs(cache_dir, exist_ok=True)
    write_ivecs(path, truth.astype(np.int32))
    return truth


def sift_like(n: int, n_queries: int, dimension: int = 128, n_modes: int | None = None, seed: int = 0):
    """Synthetic stand-in for SIFT: clustered, sparse, non-negative, integer-valued.

    Mixture of ``n_modes`` modes whose noise is Student-t (3 degrees of
    freedom), so like real descriptors the data has outliers that a plain
    2-means split tends to peel off into tiny clusters. Queries come from the
    same mixture. Returns ``(base, queries)``.
    """
    rng = np.random.default_rng(seed)
    n_modes = n_modes or max(8, int(math.sqrt(n)))
    centres = rng.gamma(0.8, 20.0, size=(n_modes, dimension))
    scales = rng.uniform(4.0, 10.0, size=(n_modes, dimension))
    weights = rng.dirichlet(np.full(n_modes, 2.0))

    def draw(m):
        modes = rng.choice(n_modes, size=m, p=weights)
        x = centres[modes] + rng.standard_t(3.0, (m, dimension)) * scales[modes]
        return np.clip(np.rint(x), 0, 255).astype(np.float32)

    return draw(n), draw(n_queries)
