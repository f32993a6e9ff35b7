"""Two-phase k-NN search under snapshot visibility."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NotFoundError, as_vector, squared_distances
from .recorder import PostingStatus, is_visible
from .store import Records


@dataclass
class SearchResult:
    neighbors: list = field(default_factory=list)
    snapshot: int = 0

    @property
    def ids(self) -> list[int]:
        return [vid for vid, _ in self.neighbors]

    @property
    def distances(self) -> list[float]:
        return [d for _, d in self.neighbors]

    def __len__(self):
        return len(self.neighbors)


def top_k(vids: np.ndarray, d2: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Deduplicate by vid and return the k nearest, ties broken by smaller vid."""
    if vids.size == 0 or k <= 0:
        return []
    order = np.lexsort((vids, d2))
    vids, d2 = vids[order], d2[order]
    _, first = np.unique(vids, return_index=True)
    first.sort()
    first = first[:k]
    return [(int(vids[i]), float(np.sqrt(d2[i]))) for i in first]


def _gather(index, pid, snapshot, parts, seen, depth):
    if pid in seen:
        return
    seen.add(pid)
    try:
        entry = index.recorder.load(pid)
    except NotFoundError:
        return
    parked = index.cache.records(pid)
    if parked is not None:
        parts.append(parked)
    if entry.status == PostingStatus.DELETED:
        successors = entry.successors
        all_visible = True
        for succ in successors:
            if is_visible(index.recorder.load(succ), snapshot) and depth < index.config.max_chase_depth:
                _gather(index, succ, snapshot, parts, seen, depth + 1)
            else:
                all_visible = False
        if all_visible:
            return
    elif not is_visible(entry, snapshot):
        return
    try:
        parts.extend(index.store.segments(pid))
    except NotFoundError:
        return
    if (entry.status == PostingStatus.NORMAL and not index.balance_detector
            and index.lengths.get(pid, index.config.merge_threshold) < index.config.merge_threshold):
        from .engine import UpdateJob

        # Without the detector, small postings only get merged when a search touches them.
        index.request(UpdateJob.merge(pid))


def knn_search(index, q, k: int | None = None, search_postings: int | None = None) -> SearchResult:
    """Scan the nearest visible postings (and their parked vectors) for the k nearest."""
    cfg = index.config
    k = cfg.k if k is None else k
    m = cfg.search_postings if search_postings is None else search_postings
    q = as_vector(q, index.dimension)
    with index.snapshot() as s:
        parts: list[Records] = []
        seen: set[int] = set()
        for pid, _ in index.centroids.nearest_centroids(q, m):
            _gather(index, pid, s, parts, seen, 0)
        records = Records.concat(parts, index.dimension)
        records = records.take(index.versions.live_mask(records))
    d2 = squared_distances(records.vectors, q, cfg.accumulate64)
    return SearchResult(top_k(records.vids.astype(np.int64), d2, k), s)


def compute_recall(result, truth) -> float:
    """|result ∩ truth| / |truth| over vector ids."""
    truth = [int(t) for t in truth]
    if not truth:
        return 1.0
    ids = result.ids if isinstance(result, SearchResult) else result
    return len({int(i) for i in ids} & set(truth)) / len(truth)
