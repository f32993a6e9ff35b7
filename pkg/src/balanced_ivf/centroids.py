"""Exact nearest-centroid lookup over the live postings."""

from __future__ import annotations

import threading

import numpy as np

from .core import NotFoundError, UsageError, as_vector


class CentroidIndex:
    """Flat table of posting centroids with alive flags.

    Writers serialize on a lock and publish fresh array references; readers
    grab the current references without locking and may briefly see a
    centroid that was just retired (callers re-check the recorder).
    """

    def __init__(self, dimension: int, capacity: int = 64):
        self.dimension = dimension
        self._lock = threading.Lock()
        self._vectors = np.zeros((capacity, dimension), dtype=np.float32)
        self._alive = np.zeros(capacity, dtype=bool)
        self._known = np.zeros(capacity, dtype=bool)

    def _grow(self, pid):
        cap = self._vectors.shape[0]
        while cap <= pid:
            cap *= 2
        vectors = np.zeros((cap, self.dimension), dtype=np.float32)
        alive = np.zeros(cap, dtype=bool)
        known = np.zeros(cap, dtype=bool)
        n = self._vectors.shape[0]
        vectors[:n] = self._vectors
        alive[:n] = self._alive
        known[:n] = self._known
        # Publish the vectors before the flags that make them reachable.
        self._vectors = vectors
        self._known = known
        self._alive = alive

    def add_centroid(self, pid: int, centroid) -> None:
        c = as_vector(centroid, self.dimension)
        with self._lock:
            if pid >= self._vectors.shape[0]:
                self._grow(pid)
            if self._known[pid]:
                raise UsageError(f"posting {pid} already has a centroid; ids are never recycled")
            self._vectors[pid] = c
            self._known[pid] = True
            self._alive[pid] = True

    def remove_centroid(self, pid: int) -> None:
        with self._lock:
            if pid >= self._alive.shape[0] or not self._known[pid]:
                raise NotFoundError(pid)
            if not self._alive[pid]:
                raise UsageError(f"posting {pid} centroid already removed")
            self._alive[pid] = False

    def centroid(self, pid: int) -> np.ndarray:
        if pid >= self._known.shape[0] or not self._known[pid]:
            raise NotFoundError(pid)
        return self._vectors[pid].copy()

    def is_alive(self, pid: int) -> bool:
        alive = self._alive
        return pid < alive.shape[0] and bool(alive[pid])

    def alive_ids(self) -> np.ndarray:
        return np.flatnonzero(self._alive)

    def __len__(self):
        return int(np.count_nonzero(self._alive))

    def nearest_centroids(self, q, m: int, exclude=()) -> list[tuple[int, float]]:
        """The ``m`` closest alive centroids as (pid, distance), nearest first."""
        if m <= 0:
            return []
        q = as_vector(q, self.dimension)
        pids, d2 = self.scan(q, exclude)
        if pids.size == 0:
            return []
        if m < pids.size:
            # Keep everything tied with the m-th value so the tie-break stays exact.
            kth = np.partition(d2, m - 1)[m - 1]
            keep = d2 <= kth
            pids, d2 = pids[keep], d2[keep]
        order = np.lexsort((pids, d2))[:m]
        return [(int(pids[i]), float(np.sqrt(d2[i]))) for i in order]

    def scan(self, q: np.ndarray, exclude=()) -> tuple[np.ndarray, np.ndarray]:
        """Squared distances from ``q`` to every alive centroid."""
        vectors, alive = self._vectors, self._alive
        n = min(vectors.shape[0], alive.shape[0])
        pids = np.flatnonzero(alive[:n])
        if len(exclude):
            pids = pids[~np.isin(pids, list(exclude))]
        diff = vectors[pids].astype(np.float64) - q.astype(np.float64)
        return pids, np.einsum("ij,ij->i", diff, diff)
