"""Redo log: segmented appends, torn tails, and the halt-at-first-damage
replay rule that keeps recovery deterministic."""

import random

from replikv.storage.fs import VirtualFileSystem
from replikv.storage.redolog import (RedoLog, list_segment_ids, replay,
                                     segment_name)


def records_of(fs):
    return [(sid, r.track_id, r.paxos_id, r.value) for sid, r in replay(fs)]


def test_append_sync_replay_round_trip():
    fs = VirtualFileSystem()
    rlog = RedoLog(fs, segment_size=100_000, first_segment_id=1)
    written = []
    for i in range(1, 50):
        rlog.append(7, i, b"value%d" % i)
        written.append((1, 7, i, b"value%d" % i))
    assert rlog.has_unsynced()
    rlog.sync()
    assert not rlog.has_unsynced()
    assert records_of(fs) == written


def test_rolls_segments_at_size():
    fs = VirtualFileSystem()
    rlog = RedoLog(fs, segment_size=300, first_segment_id=1)
    for i in range(1, 40):
        rlog.append(1, i, bytes(40))
    rlog.sync()
    ids = list_segment_ids(fs)
    assert len(ids) > 3
    assert ids == list(range(1, ids[-1] + 1))
    got = records_of(fs)
    assert [r[2] for r in got] == list(range(1, 40))
    # records never straddle segments: each replays from exactly one file
    assert all(got[i][0] <= got[i + 1][0] for i in range(len(got) - 1))


def test_crash_tears_unsynced_tail_only():
    rng = random.Random(11)
    for trial in range(30):
        fs = VirtualFileSystem()
        rlog = RedoLog(fs, segment_size=100_000, first_segment_id=1)
        for i in range(1, 11):
            rlog.append(3, i, b"v%d" % i)
            if i == 6:
                rlog.sync()
        fs.crash(rng)
        got = records_of(fs)
        assert len(got) >= 6, "synced records lost"
        assert got == [(1, 3, i, b"v%d" % i) for i in range(1, len(got) + 1)]


def test_corruption_abandons_later_segments():
    fs = VirtualFileSystem()
    rlog = RedoLog(fs, segment_size=400, first_segment_id=1)
    for i in range(1, 40):
        rlog.append(1, i, bytes(40))
    rlog.sync()
    ids = list_segment_ids(fs)
    assert len(ids) >= 3
    victim = segment_name(ids[1])
    data = fs._files[victim].data
    data[len(data) // 2] ^= 0xFF
    got = records_of(fs)
    assert got, "records before the damage must replay"
    assert all(sid == ids[0] or sid == ids[1] for sid, _, _, _ in got)
    max_seen = max(r[2] for r in got)
    assert [r[2] for r in got] == list(range(1, max_seen + 1))
    assert max_seen < 39


def test_segment_header_mismatch_halts():
    fs = VirtualFileSystem()
    rlog = RedoLog(fs, segment_size=100_000, first_segment_id=1)
    rlog.append(1, 1, b"a")
    rlog.sync()
    rlog.close()
    # a segment whose header disagrees with its file name is not trusted
    fs.rename(segment_name(1), segment_name(2))
    assert records_of(fs) == []


def test_delete_below_keeps_active_segment():
    fs = VirtualFileSystem()
    rlog = RedoLog(fs, segment_size=300, first_segment_id=1)
    for i in range(1, 40):
        rlog.append(1, i, bytes(40))
    rlog.sync()
    current = rlog.current_segment_id
    rlog.delete_below(current + 100)
    assert list_segment_ids(fs) == [current]
    assert rlog.total_size() == fs.file_size(segment_name(current))


def test_fresh_log_starts_after_existing_segments():
    fs = VirtualFileSystem()
    first = RedoLog(fs, segment_size=100_000, first_segment_id=1)
    first.append(1, 1, b"old")
    first.sync()
    first.close()
    ids = list_segment_ids(fs)
    second = RedoLog(fs, segment_size=100_000, first_segment_id=ids[-1] + 1)
    second.append(1, 2, b"new")
    second.sync()
    got = records_of(fs)
    assert [(sid, pid) for sid, _, pid, _ in got] == [(1, 1), (2, 2)]
