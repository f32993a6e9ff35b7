"""Per-posting state words and the global version counter.

Each posting owns one 64-bit word::

    bits 63..62  status
    bits 61..46  weight (16-bit version stamp)
    bits 45..23  first successor posting id
    bits 22..0   second successor posting id

An all-ones successor field means "no successor". Words only change through
compare-and-swap, so readers never see a half-updated entry.
"""

from __future__ import annotations

import enum
import threading
from typing import NamedTuple

from .core import MAX_PID, NONE_PID, NotFoundError, UsageError

WEIGHT_BITS = 16
MAX_WEIGHT = (1 << WEIGHT_BITS) - 1
# Weight of a posting created but not yet committed; no snapshot can exceed it.
PENDING_WEIGHT = MAX_WEIGHT
MAX_VERSION = MAX_WEIGHT - 1

_STATUS_SHIFT = 62
_WEIGHT_SHIFT = 46
_SUCC_A_SHIFT = 23
_PID_MASK = NONE_PID
_N_STRIPES = 64


class PostingStatus(enum.IntEnum):
    NORMAL = 0
    SPLITTING = 1
    MERGING = 2
    DELETED = 3


LEGAL_TRANSITIONS = frozenset({
    (PostingStatus.NORMAL, PostingStatus.SPLITTING),
    (PostingStatus.NORMAL, PostingStatus.MERGING),
    (PostingStatus.SPLITTING, PostingStatus.NORMAL),
    (PostingStatus.MERGING, PostingStatus.NORMAL),
    (PostingStatus.SPLITTING, PostingStatus.DELETED),
    (PostingStatus.MERGING, PostingStatus.DELETED),
})


class RecorderEntry(NamedTuple):
    status: PostingStatus = PostingStatus.NORMAL
    weight: int = 0
    succ_a: int = NONE_PID
    succ_b: int = NONE_PID

    @property
    def successors(self):
        return [p for p in (self.succ_a, self.succ_b) if p != NONE_PID]


def _check_pid_field(value, name):
    if not 0 <= value <= NONE_PID:
        raise UsageError(f"{name}={value} outside the 23-bit posting id range")


def encode(status, weight, succ_a=NONE_PID, succ_b=NONE_PID) -> int:
    status = PostingStatus(status)
    if not 0 <= weight <= MAX_WEIGHT:
        raise UsageError(f"weight {weight} does not fit in 16 bits")
    _check_pid_field(succ_a, "succ_a")
    _check_pid_field(succ_b, "succ_b")
    if status == PostingStatus.DELETED:
        if succ_a == NONE_PID:
            raise UsageError("a deleted posting needs at least one successor")
    elif succ_a != NONE_PID or succ_b != NONE_PID:
        raise UsageError(f"status {status.name} cannot carry successor pointers")
    return (int(status) << _STATUS_SHIFT) | (weight << _WEIGHT_SHIFT) | (succ_a << _SUCC_A_SHIFT) | succ_b


def decode(word: int) -> RecorderEntry:
    return RecorderEntry(
        PostingStatus((word >> _STATUS_SHIFT) & 0b11),
        (word >> _WEIGHT_SHIFT) & MAX_WEIGHT,
        (word >> _SUCC_A_SHIFT) & _PID_MASK,
        word & _PID_MASK,
    )


def is_visible(entry: RecorderEntry, snapshot: int) -> bool:
    """A posting is visible to a snapshot strictly newer than its weight."""
    return snapshot > entry.weight


class PostingRecorder:
    """Dense array of posting words plus the global version.

    ``transition`` is the only way to change a posting's status. Word updates
    are guarded by striped locks that emulate a hardware compare-exchange;
    loads take no lock. Renormalization excludes all writers.
    """

    def __init__(self, log_transitions: bool = False):
        self._words: list[int] = []
        self._stripes = [threading.Lock() for _ in range(_N_STRIPES)]
        self._grow_lock = threading.Lock()
        self._version_lock = threading.Lock()
        self._global_version = 1
        self.renormalizations = 0
        self.transition_log = [] if log_transitions else None

    def __len__(self):
        return len(self._words)

    def allocate(self, weight: int = PENDING_WEIGHT) -> int:
        """Append a fresh Normal entry and return its posting id."""
        word = encode(PostingStatus.NORMAL, weight)
        with self._grow_lock:
            pid = len(self._words)
            if pid > MAX_PID:
                raise UsageError("posting id space exhausted")
            self._words.append(word)
        return pid

    def ensure(self, pid: int, weight: int = 0) -> None:
        """Grow the array so ``pid`` exists (used when reopening a store)."""
        with self._grow_lock:
            while len(self._words) <= pid:
                self._words.append(encode(PostingStatus.NORMAL, weight))

    def load_word(self, pid: int) -> int:
        try:
            return self._words[pid]
        except IndexError:
            raise NotFoundError(pid) from None

    def load(self, pid: int) -> RecorderEntry:
        return decode(self.load_word(pid))

    def transition(self, pid: int, expected: RecorderEntry, desired: RecorderEntry) -> bool:
        if (expected.status, desired.status) not in LEGAL_TRANSITIONS:
            raise UsageError(f"illegal transition {expected.status.name} -> {desired.status.name}")
        old = encode(*expected)
        new = encode(*desired)
        with self._stripes[pid % _N_STRIPES]:
            if self.load_word(pid) != old:
                return False
            self._words[pid] = new
            if self.transition_log is not None:
                self.transition_log.append((pid, expected.status, desired.status))
        return True

    def try_begin(self, pid: int, status: PostingStatus) -> RecorderEntry | None:
        """CAS a Normal posting into ``status``; returns the new entry or None."""
        current = self.load(pid)
        if current.status != PostingStatus.NORMAL or current.weight == PENDING_WEIGHT:
            return None
        desired = current._replace(status=status)
        return desired if self.transition(pid, current, desired) else None

    def end(self, pid: int, status: PostingStatus, succ_a: int = NONE_PID, succ_b: int = NONE_PID) -> None:
        """Leave Splitting/Merging for ``status``, keeping whatever weight is current."""
        while True:
            current = self.load(pid)
            if current.status not in (PostingStatus.SPLITTING, PostingStatus.MERGING):
                raise UsageError(f"posting {pid} is {current.status.name}, not under a structural op")
            if self.transition(pid, current, RecorderEntry(status, current.weight, succ_a, succ_b)):
                return

    def snapshot(self) -> int:
        return self._global_version

    def commit_structural(self, new_pids) -> int:
        """Stamp new postings with the current version, then advance it."""
        with self._version_lock:
            if self._global_version >= MAX_VERSION:
                self._renormalize()
            stamp = self._global_version
            for pid in new_pids:
                self._set_weight(pid, stamp)
            self._global_version = stamp + 1
            return self._global_version

    def _set_weight(self, pid, weight):
        with self._stripes[pid % _N_STRIPES]:
            entry = decode(self._words[pid])
            self._words[pid] = encode(entry.status, weight, entry.succ_a, entry.succ_b)

    def _renormalize(self):
        # Caller holds the version lock; take every stripe to stop writers.
        for lock in self._stripes:
            lock.acquire()
        try:
            for pid, word in enumerate(self._words):
                entry = decode(word)
                if entry.weight != PENDING_WEIGHT:
                    self._words[pid] = encode(entry.status, 0, entry.succ_a, entry.succ_b)
            self._global_version = 1
            self.renormalizations += 1
        finally:
            for lock in reversed(self._stripes):
                lock.release()

    def dump(self) -> str:
        lines = []
        for pid, word in enumerate(self._words):
            e = decode(word)
            lines.append(f"{pid} {int(e.status)} {e.weight} {e.succ_a} {e.succ_b}")
        return "\n".join(lines)
