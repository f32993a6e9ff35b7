"""Structural maintenance: balanced split, merge, reassign, detector scan."""

from __future__ import annotations

import contextlib
import csv
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import NONE_PID, NotFoundError
from .recorder import PENDING_WEIGHT, PostingStatus
from .store import Records

logger = logging.getLogger(__name__)

_LLOYD_MAX_ITER = 16
_LLOYD_TOL = 1e-4
_SEED_PAIRS = 32


class SplitKind(enum.Enum):
    SHRUNK = "shrunk"
    TWO_WAY = "two_way"
    COLLAPSED = "collapsed"


@dataclass
class SplitOutcome:
    kind: SplitKind
    new_pids: list = field(default_factory=list)
    moved: int = 0


def pairwise_sq(X: np.ndarray, C: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Exact squared distances between rows of X and rows of C (float64)."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    out = np.empty((X.shape[0], C.shape[0]))
    for start in range(0, X.shape[0], chunk):
        diff = X[start:start + chunk, None, :] - C[None, :, :]
        out[start:start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def two_means(X: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 2-means: labels in {0, 1} and the two cluster means.

    Seeds with the farthest of 32 random pairs, runs at most 16 Lloyd steps,
    and repairs an empty cluster by stealing the point farthest from the
    other centre.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        center = X.mean(axis=0) if n else np.zeros(X.shape[1])
        return np.zeros(n, dtype=np.int64), np.stack([center, center])
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n, _SEED_PAIRS)
    b = rng.integers(0, n, _SEED_PAIRS)
    d = np.einsum("ij,ij->i", X[a] - X[b], X[a] - X[b])
    best = int(np.argmax(d))
    centers = np.stack([X[a[best]], X[b[best]]])
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(_LLOYD_MAX_ITER):
        dist = pairwise_sq(X, centers)
        labels = (dist[:, 1] < dist[:, 0]).astype(np.int64)
        for k in (0, 1):
            if not np.any(labels == k):
                other = 1 - k
                members = np.flatnonzero(labels == other)
                far = members[np.argmax(dist[members, other])]
                labels[far] = k
        new = np.stack([X[labels == 0].mean(axis=0), X[labels == 1].mean(axis=0)])
        scale = max(float(np.linalg.norm(centers[0] - centers[1])), 1e-12)
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift / scale < _LLOYD_TOL:
            break
    dist = pairwise_sq(X, centers)
    final = (dist[:, 1] < dist[:, 0]).astype(np.int64)
    if np.any(final == 0) and np.any(final == 1):
        labels = final
        centers = np.stack([X[labels == 0].mean(axis=0), X[labels == 1].mean(axis=0)])
    return labels, centers


def balanced_cut(X: np.ndarray, labels: np.ndarray, centers: np.ndarray, f: float, min_side: int = 0):
    """Move the most ambiguous points to the small side until it holds >= f of all.

    ``min_side`` raises that floor (capped at half) so the small side is not
    immediately a merge candidate.
    """
    n = X.shape[0]
    counts = np.bincount(labels, minlength=2)
    small = int(np.argmin(counts))
    need = max(math.ceil(f * n), int(counts[small]), min(min_side, n // 2))
    dist = pairwise_sq(X, centers)
    lean = dist[:, small] - dist[:, 1 - small]
    order = np.lexsort((np.arange(n), lean))
    out = np.full(n, 1 - small, dtype=np.int64)
    out[order[:need]] = small
    X64 = np.asarray(X, dtype=np.float64)
    return out, np.stack([X64[out == 0].mean(axis=0), X64[out == 1].mean(axis=0)])


@contextlib.contextmanager
def _held(index, pids):
    """Posting mutexes for the coarse-lock emulation, in ascending pid order."""
    if index.fine_grained:
        yield
        return
    locks = [index.posting_lock(p) for p in sorted(set(pids))]
    for lock in locks:
        lock.acquire()
    try:
        yield
    finally:
        for lock in reversed(locks):
            lock.release()


def run_split(index, pid: int) -> bool:
    """Split job: claim the posting by CAS, then run the balanced split."""
    deferred = []
    with _held(index, [pid]):
        if index.recorder.try_begin(pid, PostingStatus.SPLITTING) is None:
            return False
        try:
            outcome = balance_split(index, pid, deferred=deferred)
        except Exception:
            if index.recorder.load(pid).status == PostingStatus.SPLITTING:
                index.recorder.end(pid, PostingStatus.NORMAL)
                index.drain_cache(pid, [pid])
            raise
    for vid, version, v, target in deferred:
        _move(index, vid, version, v, target)
    index.stats.inc("splits")
    index.stats.inc(outcome.kind.value)
    return True


def _move(index, vid, version, v, target) -> bool:
    new_version = index.versions.bump_version(vid, expected=version)
    if new_version is None:
        return False
    index.place(vid, new_version, v, start_pid=target)
    index.stats.inc("moves")
    return True


def balance_split(index, pid: int, l_max: int | None = None, f: float | None = None,
                  balanced: bool | None = None, deferred: list | None = None) -> SplitOutcome:
    """Split a posting already in Splitting status.

    Deleted and stale records are dropped first; a posting that is then
    below ``l_max`` is rewritten in place. Otherwise 2-means proposes two
    halves. If the smaller half holds less than ``f`` of the vectors, each of
    its vectors goes to an existing posting whose centroid is nearer than the
    larger half's centroid, or else joins the larger half, which becomes the
    only new posting.
    """
    cfg = index.config
    l_max = cfg.split_threshold if l_max is None else l_max
    f = cfg.balance_factor if f is None else f
    balanced = index.balance_detector if balanced is None else balanced
    entry = index.recorder.load(pid)
    if entry.status != PostingStatus.SPLITTING:
        from .core import UsageError
        raise UsageError(f"posting {pid} must be Splitting, is {entry.status.name}")

    live = index.live_records(pid)
    index.hook("read", pid)
    if len(live) < l_max:
        index.store.replace(pid, live)
        index.lengths.set(pid, len(live))
        index.recorder.end(pid, PostingStatus.NORMAL)
        index.drain_cache(pid, [pid])
        return SplitOutcome(SplitKind.SHRUNK)

    labels, centers = two_means(live.vectors, [cfg.seed, pid])
    counts = np.bincount(labels, minlength=2)
    total = int(counts.sum())
    kind = SplitKind.TWO_WAY
    moves = []
    if balanced and counts.min() < f * total:
        small = int(np.argmin(counts)) if counts[0] != counts[1] else 1
        big = 1 - small
        minority = live.take(labels == small)
        majority = live.take(labels == big)
        c_max = centers[big]
        d_max = pairwise_sq(minority.vectors, c_max[None, :])[:, 0]
        others, _ = index.centroids.scan(c_max.astype(np.float32), exclude=[pid])
        goes = np.zeros(len(minority), dtype=bool)
        targets = np.full(len(minority), -1, dtype=np.int64)
        if others.size and len(minority):
            cvecs = np.stack([index.centroids.centroid(int(p)) for p in others])
            dist = pairwise_sq(minority.vectors, cvecs)
            nearest = np.argmin(dist, axis=1)
            goes = dist[np.arange(len(minority)), nearest] < d_max
            targets = others[nearest]
        folded = Records.concat([majority, minority.take(~goes)], index.dimension)
        if len(folded) > l_max:
            # Folding would leave an oversize posting that splits the same way forever.
            labels, centers = balanced_cut(live.vectors, labels, centers, f, cfg.merge_threshold)
            index.stats.inc("balanced_cut")
        else:
            kind = SplitKind.COLLAPSED
            parts = [(folded, c_max)]
            moves = [(int(minority.vids[i]), int(minority.versions[i]), minority.vectors[i], int(targets[i]))
                     for i in np.flatnonzero(goes)]
    if kind is SplitKind.TWO_WAY:
        parts = [(live.take(labels == 0), centers[0]), (live.take(labels == 1), centers[1])]

    # Minority vectors leave before the old posting is retired so they are never unreachable.
    if index.fine_grained:
        for move in moves:
            _move(index, *move)
    elif deferred is not None:
        deferred.extend(moves)
    else:
        for move in moves:
            _move(index, *move)

    new_pids = [index.new_posting(records, centroid.astype(np.float32)) for records, centroid in parts]
    index.hook("persisted", pid)
    stamp = index.recorder.commit_structural(new_pids) - 1
    succ_b = new_pids[1] if len(new_pids) > 1 else NONE_PID
    index.recorder.end(pid, PostingStatus.DELETED, new_pids[0], succ_b)
    index.drain_cache(pid, new_pids)
    index.retire(pid, stamp)
    for npid in new_pids:
        index.request(_reassign_job(npid))
    return SplitOutcome(kind, new_pids, moved=len(moves))


def _reassign_job(pid):
    from .engine import UpdateJob

    return UpdateJob.reassign(pid)


def merge(index, pid: int, l_min: int | None = None, l_max: int | None = None) -> bool:
    """Merge a small posting into its nearest partner that keeps the sum under l_max."""
    cfg = index.config
    l_min = cfg.merge_threshold if l_min is None else l_min
    l_max = cfg.split_threshold if l_max is None else l_max
    entry = index.recorder.load(pid)
    if entry.status != PostingStatus.NORMAL or entry.weight == PENDING_WEIGHT:
        return False
    if index.lengths.get(pid, l_min) >= l_min:
        return False
    centroid = index.centroids.centroid(pid)
    candidates = index.centroids.nearest_centroids(centroid, cfg.merge_candidates, exclude=[pid])
    for partner, _ in candidates:
        if index.lengths.get(pid) + index.lengths.get(partner, l_max) >= l_max:
            continue
        first, second = sorted((pid, partner))
        with _held(index, [first, second]):
            if index.recorder.try_begin(first, PostingStatus.MERGING) is None:
                continue
            if index.recorder.try_begin(second, PostingStatus.MERGING) is None:
                index.recorder.end(first, PostingStatus.NORMAL)
                index.drain_cache(first, [first])
                continue
            try:
                _merge_pair(index, first, second)
            except Exception:
                for p in (first, second):
                    if index.recorder.load(p).status == PostingStatus.MERGING:
                        index.recorder.end(p, PostingStatus.NORMAL)
                        index.drain_cache(p, [p])
                raise
        index.stats.inc("merges")
        return True
    return False


def _merge_pair(index, a, b):
    ra, rb = index.live_records(a), index.live_records(b)
    union = Records.concat([ra, rb], index.dimension)
    if len(union):
        centroid = union.vectors.astype(np.float64).mean(axis=0)
    else:
        centroid = (index.centroids.centroid(a).astype(np.float64) + index.centroids.centroid(b)) / 2
    npid = index.new_posting(union, centroid.astype(np.float32))
    stamp = index.recorder.commit_structural([npid]) - 1
    for old in (a, b):
        index.recorder.end(old, PostingStatus.DELETED, npid)
    for old in (a, b):
        index.drain_cache(old, [npid])
        index.retire(old, stamp)
    index.request(_reassign_job(npid))
    return npid


def reassign(index, pid: int) -> bool:
    """Move vectors of ``pid`` that have a strictly nearer alive centroid."""
    entry = index.recorder.load(pid)
    if entry.status == PostingStatus.DELETED:
        return False
    try:
        live = index.live_records(pid)
        own = index.centroids.centroid(pid)
    except NotFoundError:
        return False
    index.stats.inc("reassigns")
    if not len(live):
        return True
    pids, _ = index.centroids.scan(own)
    pids = np.array([p for p in pids if p == pid or not index.pending(int(p))], dtype=np.int64)
    if pids.size == 0:
        return True
    cvecs = np.stack([index.centroids.centroid(int(p)) for p in pids])
    dist = pairwise_sq(live.vectors, cvecs)
    own_col = np.flatnonzero(pids == pid)
    # Same matrix for both sides so exact ties stay ties.
    d_own = dist[:, own_col[0]] if own_col.size else pairwise_sq(live.vectors, own[None, :])[:, 0]
    nearest = np.argmin(dist, axis=1)
    best = dist[np.arange(len(live)), nearest]
    for i in np.flatnonzero(best < d_own):
        target = int(pids[nearest[i]])
        if target == pid:
            continue
        if _move(index, int(live.vids[i]), int(live.versions[i]), live.vectors[i], target):
            index.lengths.add(pid, -1)
    return True


def reassign_records(index, records: Records) -> bool:
    """Place explicitly listed vectors at their nearest alive posting."""
    index.stats.inc("reassigns")
    for i in range(len(records)):
        vid, version = int(records.vids[i]), int(records.versions[i])
        if index.versions.is_live(vid, version):
            index.place(vid, version, records.vectors[i])
    return True


def detector_scan(index) -> list:
    """Enqueue splits/merges for postings outside [l_min, l_max] (memory only)."""
    from .engine import UpdateJob

    cfg = index.config
    jobs = []
    for pid, length in index.lengths.items():
        entry = index.recorder.load(pid)
        if entry.status != PostingStatus.NORMAL or entry.weight == PENDING_WEIGHT:
            continue
        if length > cfg.split_threshold:
            job = UpdateJob.split(pid)
        elif length < cfg.merge_threshold:
            job = UpdateJob.merge(pid)
        else:
            continue
        if index.request(job):
            jobs.append(job)
    index.reclaim_deleted()
    return jobs


def distribution(index) -> list[tuple[int, int, str]]:
    """(pid, live length, status) for every alive posting."""
    rows = []
    for pid in index.alive_pids():
        try:
            n = len(index.live_records(pid))
        except NotFoundError:
            continue
        rows.append((pid, n, index.recorder.load(pid).status.name))
    return rows


def write_distribution(index, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pid", "live_length", "status"])
        w.writerows(distribution(index))
