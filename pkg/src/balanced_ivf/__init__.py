"""Updatable, balance-maintaining cluster index for streaming k-NN search."""

from .core import (
    ConfigError,
    FormatError,
    IndexConfig,
    NotFoundError,
    UsageError,
    distance,
)
from .engine import UpdatableIndex, UpdateJob
from .estimator import BalancedIVFIndex
from .search import SearchResult, compute_recall, knn_search

__all__ = [
    "BalancedIVFIndex",
    "ConfigError",
    "FormatError",
    "IndexConfig",
    "NotFoundError",
    "SearchResult",
    "UpdatableIndex",
    "UpdateJob",
    "UsageError",
    "compute_recall",
    "distance",
    "knn_search",
]

__version__ = "0.1.0"
