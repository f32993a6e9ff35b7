"""Update controller: routing of inserts and deletes, job queue, vector cache.

Foreground inserts pick the nearest posting and act on its recorded status:

* Normal: append, then re-validate. If a split or merge started in between
  (status changed, or the appended segment was replaced away) the vector's
  version is bumped and it is routed again, so exactly one copy stays live.
* Splitting / Merging: park the vector in the vector cache; the structural
  op drains the cache into the new postings after it commits.
* Deleted: follow successor pointers to the nearer live successor.

With ``fine_grained=False`` the controller instead emulates a posting-level
mutex: inserts block while a posting is being split or merged and re-run
the nearest-posting search when they find it deleted.
"""

from __future__ import annotations

import collections
import contextlib
import dataclasses
import enum
import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .centroids import CentroidIndex
from .core import IndexConfig, NotFoundError, UsageError, as_vector
from .recorder import PENDING_WEIGHT, PostingRecorder, PostingStatus
from .store import FilePostingStore, MemoryPostingStore, PostingStore, Records, VersionMap

logger = logging.getLogger(__name__)

_BUSY = (PostingStatus.SPLITTING, PostingStatus.MERGING)


class JobKind(enum.Enum):
    SPLIT = "split"
    MERGE = "merge"
    REASSIGN = "reassign"


@dataclass(frozen=True)
class UpdateJob:
    kind: JobKind
    pid: int | None = None
    records: Records | None = None

    @classmethod
    def split(cls, pid):
        return cls(JobKind.SPLIT, pid)

    @classmethod
    def merge(cls, pid):
        return cls(JobKind.MERGE, pid)

    @classmethod
    def reassign(cls, pid=None, records=None):
        return cls(JobKind.REASSIGN, pid, records)


class JobQueue:
    """Bounded FIFO with blocking backpressure and idle tracking.

    ``put(force=True)`` ignores the bound; workers use it so that a full
    queue can never deadlock the threads that drain it.
    """

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._items = collections.deque()
        self._cond = threading.Condition()
        self._in_flight = 0
        self._closed = False

    def __len__(self):
        return len(self._items)

    def put(self, job: UpdateJob, block: bool = True, force: bool = False) -> None:
        with self._cond:
            if not force:
                while len(self._items) >= self.capacity and not self._closed and block:
                    self._cond.wait()
            self._items.append(job)
            self._cond.notify_all()

    def get(self, timeout: float | None = None) -> UpdateJob | None:
        """Next job, or None once the queue is closed and empty (or on timeout)."""
        with self._cond:
            while not self._items and not self._closed:
                if not self._cond.wait(timeout):
                    return None
            if not self._items:
                return None
            self._in_flight += 1
            job = self._items.popleft()
            self._cond.notify_all()
            return job

    def get_nowait(self) -> UpdateJob | None:
        with self._cond:
            if not self._items:
                return None
            self._in_flight += 1
            job = self._items.popleft()
            self._cond.notify_all()
            return job

    def task_done(self) -> None:
        with self._cond:
            self._in_flight -= 1
            self._cond.notify_all()

    def idle(self) -> bool:
        return not self._items and self._in_flight == 0

    def wait_idle(self, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(self.idle, timeout)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class VectorCache:
    """Vectors waiting for a posting that is being split or merged.

    ``push`` checks the posting status under the cache lock, and structural
    ops flip the status before draining, so no vector can slip into a slot
    after its drain started. Drained items leave the slot only after they
    have been appended elsewhere, which keeps them searchable throughout.
    """

    def __init__(self, recorder: PostingRecorder, dimension: int):
        self._recorder = recorder
        self._dimension = dimension
        self._slots: dict[int, list] = {}
        self._lock = threading.Lock()

    def push(self, pid: int, vid: int, version: int, vector: np.ndarray) -> bool:
        with self._lock:
            if self._recorder.load(pid).status not in _BUSY:
                return False
            self._slots.setdefault(pid, []).append((vid, version, vector))
            return True

    def items(self, pid: int) -> list:
        with self._lock:
            return list(self._slots.get(pid, ()))

    def discard(self, pid: int, n: int) -> None:
        with self._lock:
            slot = self._slots.get(pid)
            if slot is None:
                return
            del slot[:n]
            if not slot:
                del self._slots[pid]

    def records(self, pid: int) -> Records | None:
        items = self.items(pid)
        if not items:
            return None
        vids, versions, vectors = zip(*items)
        return Records.of(vids, versions, np.stack(vectors))

    def __len__(self):
        with self._lock:
            return sum(len(s) for s in self._slots.values())

    def pids(self):
        with self._lock:
            return list(self._slots)


class LengthTable:
    """Approximate live length per posting, kept in memory."""

    def __init__(self):
        self._lengths: dict[int, int] = {}
        self._lock = threading.Lock()

    def add(self, pid, delta):
        with self._lock:
            if pid in self._lengths:
                self._lengths[pid] += delta

    def set(self, pid, value):
        with self._lock:
            self._lengths[pid] = value

    def drop(self, pid):
        with self._lock:
            self._lengths.pop(pid, None)

    def get(self, pid, default=0):
        return self._lengths.get(pid, default)

    def items(self):
        with self._lock:
            return list(self._lengths.items())


class Stats:
    """Thread-safe event counters."""

    FIELDS = ("inserts", "deletes", "splits", "merges", "reassigns", "moves",
              "dropped", "shrunk", "two_way", "collapsed", "balanced_cut", "cache_hits",
              "reroutes", "reclaimed")

    def __init__(self):
        self._lock = threading.Lock()
        self._c = dict.fromkeys(self.FIELDS, 0)

    def inc(self, name, n=1):
        with self._lock:
            self._c[name] += n

    def __getitem__(self, name):
        return self._c[name]

    def snapshot(self):
        with self._lock:
            return dict(self._c)

    def jobs_completed(self, snap=None):
        c = snap or self._c
        return c["inserts"] + c["deletes"] + c["splits"] + c["merges"] + c["reassigns"]


class UpdatableIndex:
    """Cluster-based ANN index that accepts concurrent inserts and deletes.

    Without :meth:`start` no background threads exist and queued jobs run
    inline in :meth:`drain`, which makes every run deterministic.
    """

    def __init__(self, config: IndexConfig, store: PostingStore | None = None, *,
                 fine_grained: bool = True, balance_detector: bool = True):
        self.config = config
        self.dimension = config.dimension
        self.store = store if store is not None else MemoryPostingStore(config.dimension)
        self.fine_grained = fine_grained
        self.balance_detector = balance_detector
        self.recorder = PostingRecorder()
        self.centroids = CentroidIndex(config.dimension)
        self.versions = VersionMap()
        self.cache = VectorCache(self.recorder, config.dimension)
        self.lengths = LengthTable()
        self.queue = JobQueue(config.queue_capacity)
        self.stats = Stats()
        self.errors: list[BaseException] = []
        self.locations: dict[int, int] = {}
        self.deleted_at: dict[int, int] = {}
        self._pending: set = set()
        self._pending_lock = threading.Lock()
        self._plocks: dict[int, threading.Lock] = {}
        self._plocks_guard = threading.Lock()
        self._active: collections.Counter = collections.Counter()
        self._active_lock = threading.Lock()
        self._workers: list[threading.Thread] = []
        self._detector: threading.Thread | None = None
        self._stop = threading.Event()
        # Test hook: called as hook(stage, pid) at structural-op milestones.
        self.split_hook = None

    # ------------------------------------------------------------------ setup

    @property
    def threaded(self) -> bool:
        return bool(self._workers)

    def bulk_load(self, vectors, vids=None, seed: int | None = None) -> None:
        """Build the initial postings with k-means (about l_max/2 vectors each)."""
        from sklearn.cluster import KMeans

        if len(self.recorder):
            raise UsageError("bulk_load needs an empty index")
        X = np.asarray(vectors, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != self.dimension:
            raise UsageError(f"expected shape (n, {self.dimension}), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise UsageError("vector components must be finite")
        n = X.shape[0]
        vids = np.arange(n, dtype=np.int64) if vids is None else np.asarray(vids, dtype=np.int64).reshape(-1)
        if vids.shape[0] != n or np.unique(vids).size != n or (n and vids.min() < 0):
            raise UsageError("vids must be distinct non-negative ids, one per vector")
        if n == 0:
            return
        n_clusters = max(1, min(n, math.ceil(n / (self.config.split_threshold / 2))))
        seed = self.config.seed if seed is None else seed
        km = KMeans(n_clusters=n_clusters, n_init=1, random_state=seed).fit(X)
        for vid in vids:
            self.versions.register(int(vid))
        for label in range(n_clusters):
            members = np.flatnonzero(km.labels_ == label)
            if members.size == 0:
                continue
            records = Records.of(vids[members], np.zeros(members.size), X[members])
            pid = self.recorder.allocate(weight=0)
            self.store.create(records, pid)
            self.lengths.set(pid, members.size)
            for vid in vids[members]:
                self.locations[int(vid)] = pid
            self.centroids.add_centroid(pid, km.cluster_centers_[label])
            if members.size > self.config.split_threshold:
                self.request(UpdateJob.split(pid))

    def start(self) -> "UpdatableIndex":
        if self._workers:
            return self
        self._stop.clear()
        for i in range(self.config.bg_threads):
            t = threading.Thread(target=self._worker_loop, name=f"bg-worker-{i}", daemon=True)
            t.start()
            self._workers.append(t)
        if self.balance_detector:
            self._detector = threading.Thread(target=self._detector_loop, name="balance-detector", daemon=True)
            self._detector.start()
        return self

    def stop(self) -> None:
        """Drain every queued job, then stop the background threads."""
        if not self._workers:
            self.drain()
            return
        self.drain()
        self._stop.set()
        if self._detector is not None:
            self._detector.join()
            self._detector = None
        self.queue.close()
        for t in self._workers:
            t.join()
        self._workers = []
        self.queue = JobQueue(self.config.queue_capacity)

    def close(self) -> None:
        self.stop()
        self.reclaim_deleted()
        if isinstance(self.store, FilePostingStore):
            self._checkpoint()
        self.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------ persistence

    @classmethod
    def create(cls, directory, config: IndexConfig, **kwargs) -> "UpdatableIndex":
        store = FilePostingStore(directory, config.dimension, io_delay=kwargs.pop("io_delay", 0.0), fresh=True)
        return cls(config, store, **kwargs)

    def _checkpoint(self):
        store = self.store
        alive = [int(p) for p in self.centroids.alive_ids()]
        store.extra = {
            "config": dataclasses.asdict(self.config),
            "next_pid": len(self.recorder),
            "centroids": {str(p): self.centroids.centroid(p).tolist() for p in alive},
        }
        self.versions.save(Path(store.directory) / "versions.npz")

    @classmethod
    def open(cls, directory, config: IndexConfig | None = None, **kwargs) -> "UpdatableIndex":
        """Reopen a cleanly closed file-backed index (config defaults to the saved one)."""
        if config is None:
            config = IndexConfig(**FilePostingStore.read_extra(directory).get("config", {}))
        store = FilePostingStore(directory, config.dimension, io_delay=kwargs.pop("io_delay", 0.0))
        index = cls(config, store, **kwargs)
        extra = store.extra
        index.versions = VersionMap.load(Path(directory) / "versions.npz")
        next_pid = int(extra.get("next_pid", 0))
        for _ in range(next_pid):
            index.recorder.allocate(weight=PENDING_WEIGHT)
        for pid_s, centroid in extra.get("centroids", {}).items():
            pid = int(pid_s)
            index.recorder._set_weight(pid, 0)
            index.centroids.add_centroid(pid, np.asarray(centroid, dtype=np.float32))
            records = store.read(pid)
            live = records.take(index.versions.live_mask(records))
            index.lengths.set(pid, len(live))
            for vid in live.vids:
                index.locations[int(vid)] = pid
        return index

    # ------------------------------------------------------------ foreground

    def insert(self, vid: int, vector) -> None:
        v = as_vector(vector, self.dimension)
        if not len(self.recorder):
            raise UsageError("index is empty; call bulk_load first")
        version = self.versions.register(int(vid))
        self.stats.inc("inserts")
        self.place(int(vid), version, v)

    def delete(self, vid: int) -> bool:
        """Tombstone ``vid``; returns False if it was already deleted."""
        vid = int(vid)
        if vid not in self.versions:
            raise NotFoundError(vid)
        if not self.versions.mark_deleted(vid):
            return False
        self.stats.inc("deletes")
        pid = self.locations.get(vid)
        if pid is not None:
            self.lengths.add(pid, -1)
        return True

    def nearest_pid(self, v: np.ndarray, exclude=()) -> int | None:
        pids, d2 = self.centroids.scan(v, exclude)
        # Uncommitted postings are invisible to searches; vectors routed there would vanish until commit.
        for i in np.lexsort((pids, d2)):
            if not self.pending(int(pids[i])):
                return int(pids[i])
        return None

    def pending(self, pid: int) -> bool:
        return self.recorder.load(pid).weight == PENDING_WEIGHT

    def _nearer(self, v: np.ndarray, pids) -> int:
        if len(pids) == 1:
            return pids[0]
        d = [float(np.sum((self.centroids.centroid(p).astype(np.float64) - v) ** 2)) for p in pids]
        return pids[int(np.argmin(d))]

    def place(self, vid: int, version: int, v: np.ndarray, start_pid: int | None = None) -> int | None:
        """Route one record to a posting (or the cache); returns where it landed."""
        pid = start_pid
        depth = 0
        while True:
            if pid is None:
                pid = self.nearest_pid(v)
                if pid is None:
                    raise UsageError("index has no postings; bulk_load first")
                depth = 0
            if not self.fine_grained:
                landed, pid = self._place_coarse(vid, version, v, pid)
                if landed is not None:
                    return landed
                continue
            entry = self.recorder.load(pid)
            if entry.status == PostingStatus.NORMAL and entry.weight == PENDING_WEIGHT:
                pid = None
                continue
            if entry.status == PostingStatus.NORMAL:
                if self._append_checked(pid, vid, version, v):
                    return pid
                self.stats.inc("reroutes")
                version = self.versions.bump_version(vid, expected=version)
                if version is None:
                    return None
                continue
            if entry.status in _BUSY:
                if self.cache.push(pid, vid, version, v):
                    self.stats.inc("cache_hits")
                    return pid
                continue
            depth += 1
            if depth > self.config.max_chase_depth:
                self.request(UpdateJob.reassign(records=Records.of([vid], [version], v)), force=True)
                return None
            pid = self._nearer(v, entry.successors)

    def _append_checked(self, pid, vid, version, v) -> bool:
        try:
            token = self.store.append(pid, Records.of([vid], [version], v))
        except NotFoundError:
            return False
        if self.recorder.load(pid).status != PostingStatus.NORMAL or not self.store.holds(pid, token):
            return False
        self._landed(pid, vid)
        return True

    def _landed(self, pid, vid):
        self.locations[vid] = pid
        self.lengths.add(pid, 1)
        if self.lengths.get(pid) > self.config.split_threshold:
            self.request(UpdateJob.split(pid))

    def posting_lock(self, pid) -> threading.Lock:
        lock = self._plocks.get(pid)
        if lock is None:
            with self._plocks_guard:
                lock = self._plocks.setdefault(pid, threading.Lock())
        return lock

    def _place_coarse(self, vid, version, v, pid):
        with self.posting_lock(pid):
            entry = self.recorder.load(pid)
            if entry.status == PostingStatus.NORMAL and entry.weight != PENDING_WEIGHT:
                try:
                    self.store.append(pid, Records.of([vid], [version], v))
                except NotFoundError:
                    return None, None
                self._landed(pid, vid)
                return pid, pid
        # Deleted under the lock: search for the nearest posting again.
        self.stats.inc("reroutes")
        return None, None

    # ------------------------------------------------------------ jobs

    def request(self, job: UpdateJob, block: bool = False, force: bool = True) -> bool:
        """Enqueue a job unless an identical split/merge is already waiting."""
        if job.kind is not JobKind.REASSIGN or job.records is None:
            key = (job.kind, job.pid)
            with self._pending_lock:
                if key in self._pending:
                    return False
                self._pending.add(key)
        self.queue.put(job, block=block, force=force)
        return True

    def enqueue(self, job: UpdateJob) -> None:
        """Public entry point: blocks while the queue is at capacity."""
        self.queue.put(job, block=True)

    def _worker_loop(self):
        while True:
            job = self.queue.get()
            if job is None:
                return
            try:
                self.execute(job)
            finally:
                self.queue.task_done()

    def _detector_loop(self):
        from .rebalance import detector_scan

        while not self._stop.wait(self.config.detector_period):
            try:
                detector_scan(self)
            except Exception:  # pragma: no cover - logged, detector keeps running
                logger.exception("detector scan failed")

    def execute(self, job: UpdateJob) -> bool:
        """Run one job; returns False if it was dropped (lost CAS or stale)."""
        from . import rebalance

        if job.pid is not None:
            with self._pending_lock:
                self._pending.discard((job.kind, job.pid))
        for attempt in (0, 1):
            try:
                if job.kind is JobKind.SPLIT:
                    done = rebalance.run_split(self, job.pid)
                elif job.kind is JobKind.MERGE:
                    done = rebalance.merge(self, job.pid)
                elif job.records is not None:
                    done = rebalance.reassign_records(self, job.records)
                else:
                    done = rebalance.reassign(self, job.pid)
                break
            except Exception as exc:
                if attempt == 1:
                    logger.exception("job %s failed twice", job)
                    self.errors.append(exc)
                    return False
                logger.warning("job %s failed, retrying once: %s", job, exc)
        if not done:
            self.stats.inc("dropped")
        return done

    def run_pending(self, limit: int | None = None) -> int:
        """Execute queued jobs inline (no worker threads)."""
        n = 0
        while limit is None or n < limit:
            job = self.queue.get_nowait()
            if job is None:
                break
            try:
                self.execute(job)
            finally:
                self.queue.task_done()
            n += 1
        return n

    def drain(self, max_rounds: int = 64, timeout: float | None = None) -> None:
        """Bring the index to quiescence: empty queue, empty cache.

        With the detector enabled, scans repeat until a scan produces no
        job that changes the index.
        """
        from .rebalance import detector_scan

        for _ in range(max_rounds):
            before = self._structural_count()
            if self._workers:
                self.queue.wait_idle(timeout)
            else:
                self.run_pending()
            if not self.balance_detector:
                break
            jobs = detector_scan(self)
            if not jobs:
                break
            if self._workers:
                self.queue.wait_idle(timeout)
            else:
                self.run_pending()
            if self._structural_count() == before:
                break
        self.reclaim_deleted()
        if self.errors:
            raise RuntimeError(f"{len(self.errors)} background job(s) failed") from self.errors[0]

    def _structural_count(self):
        s = self.stats.snapshot()
        return s["splits"] + s["merges"] + s["moves"]

    # ------------------------------------------------------------ structural helpers

    def drain_cache(self, pid: int, new_pids) -> int:
        """Move vectors parked for ``pid`` into the nearest of ``new_pids``."""
        items = self.cache.items(pid)
        for vid, version, v in items:
            if not self.versions.is_live(vid, version):
                continue
            self.place(vid, version, v, start_pid=self._nearer(v, list(new_pids)))
        self.cache.discard(pid, len(items))
        return len(items)

    def new_posting(self, records: Records, centroid) -> int:
        pid = self.recorder.allocate()
        self.store.create(records, pid)
        self.lengths.set(pid, len(records))
        for vid in records.vids:
            self.locations[int(vid)] = pid
        self.centroids.add_centroid(pid, centroid)
        return pid

    def retire(self, pid: int, stamp: int) -> None:
        self.deleted_at[pid] = stamp
        self.centroids.remove_centroid(pid)
        self.lengths.drop(pid)

    def live_records(self, pid: int) -> Records:
        records = self.store.read(pid)
        return records.take(self.versions.live_mask(records))

    def hook(self, stage, pid):
        if self.split_hook is not None:
            self.split_hook(stage, pid)

    # ------------------------------------------------------------ snapshots

    @contextlib.contextmanager
    def snapshot(self):
        with self._active_lock:
            s = self.recorder.snapshot()
            self._active[s] += 1
        try:
            yield s
        finally:
            with self._active_lock:
                self._active[s] -= 1
                if not self._active[s]:
                    del self._active[s]

    def min_active_snapshot(self) -> int | None:
        with self._active_lock:
            return min(self._active) if self._active else None

    def reclaim(self, pid: int) -> None:
        """Free one deleted posting's blob once no active snapshot can read it."""
        if self.recorder.load(pid).status != PostingStatus.DELETED:
            raise UsageError(f"posting {pid} is not deleted")
        stamp = self.deleted_at.get(pid)
        oldest = self.min_active_snapshot()
        if stamp is not None and oldest is not None and not oldest > stamp:
            raise UsageError(f"posting {pid} is still readable by snapshot {oldest}")
        if self.cache.items(pid):
            raise UsageError(f"posting {pid} still has parked vectors")
        self.deleted_at.pop(pid, None)
        self.store.reclaim(pid)
        self.stats.inc("reclaimed")

    def reclaim_deleted(self) -> int:
        """Free blobs of deleted postings no active snapshot can still read."""
        n = 0
        for pid in list(self.deleted_at):
            try:
                self.reclaim(pid)
            except UsageError:
                continue
            except NotFoundError:
                self.deleted_at.pop(pid, None)
                continue
            n += 1
        return n

    # ------------------------------------------------------------ inspection

    def alive_pids(self) -> list[int]:
        return [int(p) for p in self.centroids.alive_ids()
                if self.recorder.load(int(p)).status != PostingStatus.DELETED]

    def posting_sizes(self) -> dict[int, int]:
        """Exact live size of every alive posting (reads the store)."""
        return {pid: len(self.live_records(pid)) for pid in self.alive_pids()}

    def scan_live(self) -> collections.Counter:
        """Count live copies per vid across every stored posting and the cache."""
        counts = collections.Counter()
        for pid in self.store.pids():
            try:
                records = self.live_records(pid)
            except NotFoundError:
                continue
            if self.recorder.load(pid).status == PostingStatus.DELETED:
                continue
            counts.update(int(v) for v in records.vids)
        for pid in self.cache.pids():
            recs = self.cache.records(pid)
            if recs is not None:
                counts.update(int(v) for v in recs.vids[self.versions.live_mask(recs)])
        return counts

    def search(self, q, k=None, search_postings=None):
        from .search import knn_search

        return knn_search(self, q, k, search_postings)
