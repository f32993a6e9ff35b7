"""Scikit-learn style wrapper around :class:`UpdatableIndex`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import IndexConfig
from .engine import UpdatableIndex


class BalancedIVFIndex(BaseEstimator):
    """Nearest-neighbour estimator backed by an updatable balanced cluster index.

    ``fit`` builds the initial postings, ``partial_fit`` streams in new
    vectors, ``remove`` tombstones ids and ``kneighbors`` answers queries the
    way :class:`sklearn.neighbors.NearestNeighbors` does.

    Parameters
    ----------
    n_neighbors : int, default=10
        Neighbours returned by :meth:`kneighbors` when none is given.
    split_threshold, merge_threshold : int, default=80, 10
        Posting size bounds that trigger splits and merges.
    balance_factor : float, default=0.15
        Smallest fraction the minor side of a split may hold.
    search_postings : int, default=32
        Postings scanned per query.
    bg_threads : int, default=0
        Background workers; 0 runs maintenance inline after each call.
    balance_detector, fine_grained : bool, default=True
        Ablation switches, see :class:`UpdatableIndex`.
    store_dir : str or None
        Directory for a file-backed posting store; in memory when None.
    random_state : int, default=0
    """

    def __init__(self, n_neighbors=10, split_threshold=80, merge_threshold=10, balance_factor=0.15,
                 search_postings=32, bg_threads=0, balance_detector=True, fine_grained=True,
                 store_dir=None, random_state=0):
        self.n_neighbors = n_neighbors
        self.split_threshold = split_threshold
        self.merge_threshold = merge_threshold
        self.balance_factor = balance_factor
        self.search_postings = search_postings
        self.bg_threads = bg_threads
        self.balance_detector = balance_detector
        self.fine_grained = fine_grained
        self.store_dir = store_dir
        self.random_state = random_state

    def _config(self, dimension):
        return IndexConfig(
            dimension=dimension,
            split_threshold=self.split_threshold,
            merge_threshold=self.merge_threshold,
            balance_factor=self.balance_factor,
            search_postings=self.search_postings,
            k=self.n_neighbors,
            bg_threads=max(1, self.bg_threads),
            seed=self.random_state,
        )

    def _ids(self, ids, n):
        if ids is None:
            start = self.n_ids_
            return np.arange(start, start + n, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.shape[0] != n:
            raise ValueError(f"got {ids.shape[0]} ids for {n} vectors")
        return ids

    def fit(self, X, y=None, ids=None):
        X = check_array(X, dtype=np.float32)
        config = self._config(X.shape[1])
        if self.store_dir is None:
            index = UpdatableIndex(config, fine_grained=self.fine_grained,
                                   balance_detector=self.balance_detector)
        else:
            index = UpdatableIndex.create(self.store_dir, config, fine_grained=self.fine_grained,
                                          balance_detector=self.balance_detector)
        self.n_ids_ = 0
        ids = self._ids(ids, X.shape[0])
        index.bulk_load(X, ids)
        if self.bg_threads > 0:
            index.start()
        index.drain()
        self.index_ = index
        self.n_features_in_ = X.shape[1]
        self.n_ids_ = int(ids.max()) + 1 if ids.size else 0
        return self

    def partial_fit(self, X, y=None, ids=None):
        if not hasattr(self, "index_"):
            return self.fit(X, ids=ids)
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, index expects {self.n_features_in_}")
        ids = self._ids(ids, X.shape[0])
        for vid, x in zip(ids, X):
            self.index_.insert(int(vid), x)
        self.index_.drain()
        if ids.size:
            self.n_ids_ = max(self.n_ids_, int(ids.max()) + 1)
        return self

    def remove(self, ids):
        check_is_fitted(self, "index_")
        for vid in np.asarray(ids, dtype=np.int64).reshape(-1):
            self.index_.delete(int(vid))
        self.index_.drain()
        return self

    def kneighbors(self, X, n_neighbors=None, return_distance=True):
        check_is_fitted(self, "index_")
        X = check_array(X, dtype=np.float32)
        k = self.n_neighbors if n_neighbors is None else n_neighbors
        dist = np.full((X.shape[0], k), np.inf)
        ind = np.full((X.shape[0], k), -1, dtype=np.int64)
        for row, q in enumerate(X):
            result = self.index_.search(q, k)
            ind[row, :len(result)] = result.ids
            dist[row, :len(result)] = result.distances
        return (dist, ind) if return_distance else ind

    def close(self):
        if hasattr(self, "index_"):
            self.index_.close()
