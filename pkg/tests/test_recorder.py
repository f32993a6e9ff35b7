import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from balanced_ivf.core import NONE_PID, UsageError
from balanced_ivf.recorder import (LEGAL_TRANSITIONS, MAX_VERSION, MAX_WEIGHT, PENDING_WEIGHT, PostingRecorder,
                                   PostingStatus, RecorderEntry, decode, encode, is_visible)

S = PostingStatus
pids = st.integers(0, NONE_PID - 1)


@st.composite
def valid_entries(draw):
    status = draw(st.sampled_from(list(S)))
    weight = draw(st.integers(0, MAX_WEIGHT))
    if status is S.DELETED:
        return RecorderEntry(status, weight, draw(pids), draw(st.one_of(pids, st.just(NONE_PID))))
    return RecorderEntry(status, weight)


def test_normal_word_layout():
    word = encode(S.NORMAL, 0)
    assert word >> 62 == 0
    assert (word >> 46) & 0xFFFF == 0
    assert (word >> 23) & NONE_PID == NONE_PID
    assert word & NONE_PID == NONE_PID
    assert word < 1 << 64


def test_deleted_roundtrip():
    assert decode(encode(S.DELETED, 5, 12, 13)) == (S.DELETED, 5, 12, 13)


@given(valid_entries())
def test_roundtrip_property(entry):
    word = encode(*entry)
    assert 0 <= word < 1 << 64
    assert decode(word) == entry


def test_roundtrip_ten_thousand_random():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        status = S(int(rng.integers(4)))
        weight = int(rng.integers(0, MAX_WEIGHT + 1))
        a, b = (NONE_PID, NONE_PID)
        if status is S.DELETED:
            a = int(rng.integers(0, NONE_PID))
            b = int(rng.integers(0, NONE_PID + 1))
        got = decode(encode(status, weight, a, b))
        assert (got.status, got.weight, got.succ_a, got.succ_b) == (status, weight, a, b)


@pytest.mark.parametrize("args", [
    (S.NORMAL, MAX_WEIGHT + 1), (S.NORMAL, -1), (S.NORMAL, 0, 3, NONE_PID),
    (S.SPLITTING, 0, NONE_PID, 4), (S.DELETED, 0), (S.DELETED, 0, NONE_PID + 1, 1),
])
def test_encode_rejects_invalid_fields(args):
    with pytest.raises(UsageError):
        encode(*args)


def test_uncontended_and_stale_transition():
    rec = PostingRecorder()
    pid = rec.allocate(weight=0)
    normal = RecorderEntry(S.NORMAL, 0)
    splitting = RecorderEntry(S.SPLITTING, 0)
    assert rec.transition(pid, normal, splitting)
    assert rec.load(pid).status is S.SPLITTING
    word = rec.load_word(pid)
    assert not rec.transition(pid, normal, RecorderEntry(S.MERGING, 0))
    assert rec.load_word(pid) == word


@pytest.mark.parametrize("src,dst", [(S.NORMAL, S.DELETED), (S.SPLITTING, S.MERGING),
                                     (S.NORMAL, S.NORMAL)])
def test_illegal_transitions(src, dst):
    rec = PostingRecorder()
    pid = rec.allocate(weight=0)
    with pytest.raises(UsageError):
        rec.transition(pid, RecorderEntry(src, 0), RecorderEntry(dst, 0))


def test_deleted_is_terminal():
    assert not any(src is S.DELETED for src, _ in LEGAL_TRANSITIONS)
    rec = PostingRecorder()
    pid = rec.allocate(weight=0)
    rec.try_begin(pid, S.SPLITTING)
    rec.end(pid, S.DELETED, 1, 2)
    assert rec.try_begin(pid, S.MERGING) is None
    with pytest.raises(UsageError):
        rec.end(pid, S.NORMAL)


def test_try_begin_refuses_uncommitted():
    rec = PostingRecorder()
    pid = rec.allocate()
    assert rec.load(pid).weight == PENDING_WEIGHT
    assert rec.try_begin(pid, S.SPLITTING) is None
    rec.commit_structural([pid])
    assert rec.try_begin(pid, S.SPLITTING) is not None


def test_concurrent_cas_single_winner():
    rec = PostingRecorder()
    n_threads, rounds = 8, 300
    pids = [rec.allocate(weight=0) for _ in range(rounds)]
    wins = [[0] * n_threads for _ in range(rounds)]
    barrier = threading.Barrier(n_threads)

    def worker(t):
        for r, pid in enumerate(pids):
            barrier.wait()
            target = S.SPLITTING if (t + r) % 2 else S.MERGING
            if rec.transition(pid, RecorderEntry(S.NORMAL, 0), RecorderEntry(target, 0)):
                wins[r][t] += 1

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(sum(row) == 1 for row in wins)


def test_hammered_entry_follows_state_machine():
    rec = PostingRecorder(log_transitions=True)
    pid = rec.allocate(weight=0)
    def worker(seed):
        rng = np.random.default_rng(seed)
        for _ in range(2000):
            cur = rec.load(pid)
            if cur.status is S.DELETED:
                return
            if cur.status is S.NORMAL:
                desired = RecorderEntry(S(int(rng.integers(1, 3))), cur.weight)
            elif rng.random() < 0.002:
                desired = RecorderEntry(S.DELETED, cur.weight, 1, NONE_PID)
            else:
                desired = RecorderEntry(S.NORMAL, cur.weight)
            rec.transition(pid, cur, desired)

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    state = S.NORMAL
    for logged_pid, src, dst in rec.transition_log:
        assert logged_pid == pid
        assert src is state
        assert (src, dst) in LEGAL_TRANSITIONS
        state = dst
    assert rec.load(pid).status is state


def test_snapshot_and_commit_sequence():
    rec = PostingRecorder()
    assert rec.snapshot() == 1
    assert rec.snapshot() == rec.snapshot()
    for _ in range(3):
        rec.commit_structural([])
    assert rec.snapshot() == 4


def test_commit_stamps_pre_increment_version():
    rec = PostingRecorder()
    while rec.snapshot() < 7:
        rec.commit_structural([])
    a, b = rec.allocate(), rec.allocate()
    s_before = rec.snapshot()
    assert rec.commit_structural([a, b]) == 8
    assert rec.load(a).weight == rec.load(b).weight == 7
    assert not is_visible(rec.load(a), s_before)
    assert is_visible(rec.load(a), rec.snapshot())


@pytest.mark.parametrize("weight,s,visible", [(0, 1, True), (9, 9, False), (9, 10, True)])
def test_visibility_examples(weight, s, visible):
    assert is_visible(RecorderEntry(S.NORMAL, weight), s) is visible


def test_renormalization_at_exhaustion():
    rec = PostingRecorder()
    old = rec.allocate(weight=0)
    while rec.snapshot() < MAX_VERSION:
        rec.commit_structural([])
    late = rec.allocate()
    rec.commit_structural([late])
    assert rec.renormalizations == 1
    # Everything that existed before is visible to every future snapshot.
    assert rec.load(old).weight == 0
    assert rec.load(late).weight == 1
    assert rec.snapshot() == 2
    assert is_visible(rec.load(old), rec.snapshot())


def test_dump_is_decimal_lines():
    rec = PostingRecorder()
    a = rec.allocate(weight=0)
    b = rec.allocate(weight=0)
    rec.try_begin(a, S.SPLITTING)
    rec.end(a, S.DELETED, b, NONE_PID)
    lines = rec.dump().splitlines()
    assert lines[0] == f"0 3 0 1 {NONE_PID}"
    assert lines[1] == f"1 0 0 {NONE_PID} {NONE_PID}"
