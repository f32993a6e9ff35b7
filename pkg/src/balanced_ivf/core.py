"""Shared vocabulary: configuration, distances, identifiers and errors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

POSTING_ID_BITS = 23
NONE_PID = (1 << POSTING_ID_BITS) - 1
MAX_PID = NONE_PID - 1
MAX_VID = (1 << 32) - 1


class UsageError(Exception):
    """A caller broke an operation's precondition (programming bug)."""


class NotFoundError(KeyError):
    """Unknown posting or vector identifier."""


class FormatError(ValueError):
    """Malformed dataset or store file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Inconsistent configuration or dataset parameters."""


@dataclass(frozen=True)
class IndexConfig:
    dimension: int
    split_threshold: int = 80
    merge_threshold: int = 10
    balance_factor: float = 0.15
    search_postings: int = 32
    k: int = 10
    fg_threads: int = 1
    bg_threads: int = 4
    search_threads: int = 4
    detector_period: float = 0.1
    queue_capacity: int = 4096
    max_chase_depth: int = 8
    merge_candidates: int = 8
    accumulate64: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 1:
            raise ConfigError(f"dimension must be >= 1, got {self.dimension}")
        for name in ("split_threshold", "merge_threshold", "search_postings", "k",
                     "fg_threads", "bg_threads", "search_threads", "queue_capacity",
                     "max_chase_depth", "merge_candidates"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.merge_threshold < self.split_threshold:
            raise ConfigError("merge_threshold must be smaller than split_threshold")
        if not 0.0 < self.balance_factor < 0.5:
            raise ConfigError(f"balance_factor must lie in (0, 0.5), got {self.balance_factor}")
        if self.detector_period <= 0:
            raise ConfigError("detector_period must be positive")

    def replace(self, **changes) -> "IndexConfig":
        values = asdict(self)
        values.update(changes)
        return IndexConfig(**values)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def as_vector(x, dimension: int | None = None) -> np.ndarray:
    """Validate one vector: 1-d, finite, float32, optionally of a given length."""
    v = np.asarray(x, dtype=np.float32)
    if v.ndim != 1:
        raise UsageError(f"expected a 1-d vector, got shape {v.shape}")
    if dimension is not None and v.shape[0] != dimension:
        raise UsageError(f"dimension mismatch: expected {dimension}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise UsageError("vector components must be finite")
    return v


def squared_distances(points: np.ndarray, q: np.ndarray, accumulate64: bool = False) -> np.ndarray:
    """Squared Euclidean distance from every row of ``points`` to ``q``."""
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != q.shape[-1]:
        raise UsageError(f"dimension mismatch: {points.shape} vs {q.shape}")
    dtype = np.float64 if accumulate64 else np.float32
    diff = points.astype(dtype, copy=False) - q.astype(dtype, copy=False)
    return np.einsum("ij,ij->i", diff, diff)


def distance(p, q) -> float:
    """Euclidean distance between two vectors."""
    p = np.asarray(p, dtype=np.float32)
    q = np.asarray(q, dtype=np.float32)
    if p.shape != q.shape or p.ndim != 1:
        raise UsageError(f"dimension mismatch: {p.shape} vs {q.shape}")
    diff = p.astype(np.float64) - q.astype(np.float64)
    return math.sqrt(float(np.dot(diff, diff)))
