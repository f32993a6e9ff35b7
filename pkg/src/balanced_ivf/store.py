"""Posting storage and the per-vector version map.

A posting blob is little-endian: ``u32 record_count`` followed by
``record_count`` records of ``u32 vid, u32 assign_version, f32 * dimension``.

:class:`FilePostingStore` keeps every blob in one append-only ``postings.log``.
Each posting maps to a tuple of segments ``(offset, length)``: ``append``
writes a new blob and publishes ``old + (segment,)``; ``replace`` publishes a
single fresh segment. Readers take the tuple without locking, so they see a
prefix-consistent posting and never a mix of old and new contents.
"""

from __future__ import annotations

import abc
import json
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FormatError, NotFoundError, UsageError

_HEADER = struct.Struct("<I")


@dataclass(frozen=True)
class Records:
    """A batch of vector records; arrays are aligned and read-only by convention."""

    vids: np.ndarray
    versions: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return int(self.vids.shape[0])

    @classmethod
    def empty(cls, dimension):
        return cls(np.empty(0, np.uint32), np.empty(0, np.uint32), np.empty((0, dimension), np.float32))

    @classmethod
    def of(cls, vids, versions, vectors):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim == 1:
            vectors = vectors[None, :]
        return cls(np.asarray(vids, dtype=np.uint32).reshape(-1),
                   np.asarray(versions, dtype=np.uint32).reshape(-1), vectors)

    def take(self, mask_or_index) -> "Records":
        return Records(self.vids[mask_or_index], self.versions[mask_or_index], self.vectors[mask_or_index])

    @staticmethod
    def concat(parts, dimension) -> "Records":
        parts = [p for p in parts if p.vids.shape[0]]
        if not parts:
            return Records.empty(dimension)
        if len(parts) == 1:
            return parts[0]
        return Records(np.concatenate([p.vids for p in parts]),
                       np.concatenate([p.versions for p in parts]),
                       np.concatenate([p.vectors for p in parts]))


def encode_blob(records: Records, dimension: int) -> bytes:
    n = len(records)
    dtype = np.dtype([("vid", "<u4"), ("ver", "<u4"), ("vec", "<f4", (dimension,))])
    body = np.empty(n, dtype=dtype)
    body["vid"] = records.vids
    body["ver"] = records.versions
    body["vec"] = records.vectors
    return _HEADER.pack(n) + body.tobytes()


def decode_blob(blob: bytes, dimension: int, offset: int = 0) -> Records:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated posting header", offset)
    (n,) = _HEADER.unpack_from(blob)
    dtype = np.dtype([("vid", "<u4"), ("ver", "<u4"), ("vec", "<f4", (dimension,))])
    if len(blob) != _HEADER.size + n * dtype.itemsize:
        raise FormatError(f"posting blob of {len(blob)} bytes does not hold {n} records", offset)
    body = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size)
    return Records(body["vid"].astype(np.uint32), body["ver"].astype(np.uint32),
                   body["vec"].astype(np.float32))


class VersionMap:
    """Latest assignment version and tombstone per vector id.

    Backed by growable arrays so posting scans can filter records in bulk.
    Mutations serialize on one lock; lookups read the published arrays.
    """

    def __init__(self, capacity: int = 1024):
        self._lock = threading.Lock()
        self._version = np.zeros(capacity, dtype=np.uint32)
        self._deleted = np.zeros(capacity, dtype=bool)
        self._known = np.zeros(capacity, dtype=bool)
        self.count = 0

    def _grow(self, vid):
        cap = self._version.shape[0]
        while cap <= vid:
            cap *= 2
        n = self._version.shape[0]
        version = np.zeros(cap, np.uint32)
        deleted = np.zeros(cap, bool)
        known = np.zeros(cap, bool)
        version[:n], deleted[:n], known[:n] = self._version, self._deleted, self._known
        self._version, self._deleted, self._known = version, deleted, known

    def register(self, vid: int) -> int:
        with self._lock:
            if vid >= self._version.shape[0]:
                self._grow(vid)
            if self._known[vid]:
                raise UsageError(f"vector id {vid} was already ingested")
            self._known[vid] = True
            self.count += 1
            return 0

    def _check(self, vid):
        if vid >= self._known.shape[0] or not self._known[vid]:
            raise NotFoundError(vid)

    def __contains__(self, vid):
        known = self._known
        return 0 <= vid < known.shape[0] and bool(known[vid])

    def current(self, vid: int) -> int:
        self._check(vid)
        return int(self._version[vid])

    def is_deleted(self, vid: int) -> bool:
        self._check(vid)
        return bool(self._deleted[vid])

    def mark_deleted(self, vid: int) -> bool:
        """Set the tombstone; returns False if it was already set."""
        with self._lock:
            self._check(vid)
            if self._deleted[vid]:
                return False
            self._deleted[vid] = True
            return True

    def bump_version(self, vid: int, expected: int | None = None) -> int | None:
        """Invalidate every stored copy of ``vid``; returns the new version.

        With ``expected`` set, only bumps if the current version still equals
        it and returns None otherwise (someone else already moved the vector).
        """
        with self._lock:
            self._check(vid)
            cur = int(self._version[vid])
            if expected is not None and cur != expected:
                return None
            if self._deleted[vid]:
                return None
            self._version[vid] = cur + 1
            return cur + 1

    def live_mask(self, records: Records) -> np.ndarray:
        """True where a record is the current, non-tombstoned copy."""
        if not len(records):
            return np.zeros(0, dtype=bool)
        version, deleted = self._version, self._deleted
        vids = records.vids.astype(np.int64)
        inside = vids < min(version.shape[0], deleted.shape[0])
        safe = np.where(inside, vids, 0)
        return inside & (records.versions >= version[safe]) & ~deleted[safe]

    def is_live(self, vid: int, version: int) -> bool:
        return vid in self and not self._deleted[vid] and version >= self._version[vid]

    def live_ids(self) -> np.ndarray:
        return np.flatnonzero(self._known & ~self._deleted)

    def save(self, path) -> None:
        n = int(np.flatnonzero(self._known).max() + 1) if self.count else 0
        np.savez(path, version=self._version[:n], deleted=self._deleted[:n], known=self._known[:n])

    @classmethod
    def load(cls, path) -> "VersionMap":
        data = np.load(path)
        vm = cls(max(1024, data["known"].shape[0]))
        n = data["known"].shape[0]
        vm._version[:n] = data["version"]
        vm._deleted[:n] = data["deleted"]
        vm._known[:n] = data["known"]
        vm.count = int(data["known"].sum())
        return vm


class PostingStore(abc.ABC):
    """Storage contract for posting contents keyed by posting id."""

    dimension: int

    @abc.abstractmethod
    def create(self, records: Records, pid: int) -> None:
        """Persist a brand-new posting under ``pid``."""

    @abc.abstractmethod
    def append(self, pid: int, records: Records):
        """Append records; returns an opaque token naming the written segment."""

    @abc.abstractmethod
    def read(self, pid: int) -> Records:
        """All records appended so far, stale ones included."""

    def segments(self, pid: int) -> tuple:
        """Same records as :meth:`read`, possibly split into several batches."""
        return (self.read(pid),)

    @abc.abstractmethod
    def replace(self, pid: int, records: Records) -> None:
        """Swap the whole posting for ``records`` atomically."""

    @abc.abstractmethod
    def reclaim(self, pid: int) -> None:
        """Drop the posting; later reads raise NotFoundError."""

    @abc.abstractmethod
    def holds(self, pid: int, token) -> bool:
        """Whether the segment written by ``append`` is still part of ``pid``."""

    @abc.abstractmethod
    def pids(self) -> list[int]:
        """Every posting id currently stored."""

    def close(self) -> None:
        pass


class MemoryPostingStore(PostingStore):
    """Keeps segments as in-memory record batches."""

    def __init__(self, dimension: int):
        self.dimension = dimension
        self._table: dict[int, tuple] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _segment(records):
        # A fresh object per write, so tokens from older writes never match.
        return Records(records.vids.copy(), records.versions.copy(), records.vectors.copy())

    def create(self, records, pid):
        seg = self._segment(records)
        with self._lock:
            if pid in self._table:
                raise UsageError(f"posting {pid} already exists")
            self._table[pid] = (seg,)

    def append(self, pid, records):
        seg = self._segment(records)
        with self._lock:
            old = self._table.get(pid)
            if old is None:
                raise NotFoundError(pid)
            self._table[pid] = old + (seg,)
        return seg

    def read(self, pid):
        return Records.concat(self.segments(pid), self.dimension)

    def segments(self, pid):
        segs = self._table.get(pid)
        if segs is None:
            raise NotFoundError(pid)
        return segs

    def replace(self, pid, records):
        seg = self._segment(records)
        with self._lock:
            if pid not in self._table:
                raise NotFoundError(pid)
            self._table[pid] = (seg,)

    def reclaim(self, pid):
        with self._lock:
            if self._table.pop(pid, None) is None:
                raise NotFoundError(pid)

    def holds(self, pid, token):
        segs = self._table.get(pid, ())
        return any(s is token for s in segs)

    def pids(self):
        return sorted(self._table)


class FilePostingStore(PostingStore):
    """Log-structured file store: ``postings.log`` plus a ``manifest`` table."""

    LOG_NAME = "postings.log"
    MANIFEST_NAME = "manifest"

    def __init__(self, directory, dimension: int, io_delay: float = 0.0, fresh: bool = False):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.dimension = dimension
        # Simulated device latency per blob write, in seconds.
        self.io_delay = io_delay
        self._lock = threading.Lock()
        self._table: dict[int, tuple] = {}
        self._decoded: dict[int, tuple] = {}
        self.extra: dict = {}
        log_path = self.directory / self.LOG_NAME
        manifest = self.directory / self.MANIFEST_NAME
        if fresh and manifest.exists():
            manifest.unlink()
        if manifest.exists():
            self._load_manifest(manifest)
        elif log_path.exists():
            log_path.unlink()
        self._fd = os.open(log_path, os.O_RDWR | os.O_CREAT, 0o644)
        self._end = os.fstat(self._fd).st_size

    @classmethod
    def read_extra(cls, directory) -> dict:
        path = Path(directory) / cls.MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no index at {directory}")
        return json.loads(path.read_text()).get("extra", {})

    def _load_manifest(self, path):
        meta = json.loads(Path(path).read_text())
        if meta["dimension"] != self.dimension:
            raise FormatError(f"store dimension {meta['dimension']} != {self.dimension}")
        self._table = {int(pid): tuple(tuple(seg) for seg in segs) for pid, segs in meta["table"].items()}
        self.extra = meta.get("extra", {})

    def _write(self, blob: bytes) -> tuple[int, int]:
        with self._lock:
            offset = self._end
            self._end += len(blob)
        os.pwrite(self._fd, blob, offset)
        if self.io_delay:
            time.sleep(self.io_delay)
        return offset, len(blob)

    def _read_segment(self, seg) -> Records:
        offset, length = seg
        blob = os.pread(self._fd, length, offset)
        if len(blob) != length:
            raise FormatError("short read from posting log", offset)
        return decode_blob(blob, self.dimension, offset)

    def create(self, records, pid):
        seg = self._write(encode_blob(records, self.dimension))
        with self._lock:
            if pid in self._table:
                raise UsageError(f"posting {pid} already exists")
            self._table[pid] = (seg,)

    def append(self, pid, records):
        if pid not in self._table:
            raise NotFoundError(pid)
        seg = self._write(encode_blob(records, self.dimension))
        with self._lock:
            old = self._table.get(pid)
            if old is None:
                raise NotFoundError(pid)
            self._table[pid] = old + (seg,)
        return seg

    def read(self, pid):
        segs = self._table.get(pid)
        if segs is None:
            raise NotFoundError(pid)
        cached = self._decoded.get(pid)
        if cached is not None and cached[0] == segs:
            return cached[1]
        if cached is not None and segs[: len(cached[0])] == cached[0]:
            parts = [cached[1]] + [self._read_segment(s) for s in segs[len(cached[0]):]]
        else:
            parts = [self._read_segment(s) for s in segs]
        records = Records.concat(parts, self.dimension)
        self._decoded[pid] = (segs, records)
        return records

    def replace(self, pid, records):
        if pid not in self._table:
            raise NotFoundError(pid)
        seg = self._write(encode_blob(records, self.dimension))
        with self._lock:
            if pid not in self._table:
                raise NotFoundError(pid)
            self._table[pid] = (seg,)

    def reclaim(self, pid):
        with self._lock:
            if self._table.pop(pid, None) is None:
                raise NotFoundError(pid)
        self._decoded.pop(pid, None)

    def holds(self, pid, token):
        return token in self._table.get(pid, ())

    def pids(self):
        return sorted(self._table)

    def flush(self):
        os.fsync(self._fd)
        meta = {
            "dimension": self.dimension,
            "table": {str(pid): [list(s) for s in segs] for pid, segs in self._table.items()},
            "extra": self.extra,
        }
        tmp = self.directory / (self.MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(meta))
        os.replace(tmp, self.directory / self.MANIFEST_NAME)

    def close(self):
        if self._fd >= 0:
            self.flush()
            os.close(self._fd)
            self._fd = -1
