"""Memory and file chunks: round-trips, range scans, and corruption
detection.  A file chunk must either read back exactly what was written
or fail loudly; silent wrong answers are the one unacceptable outcome."""

import random

import pytest

from replikv.storage.chunk import (CorruptChunk, FileChunk, FileChunkWriter,
                                   MemoryChunk, PageCache, TAG_DELETE, TAG_SET,
                                   write_chunk_from_entries)
from replikv.storage.fs import VirtualFileSystem


def make_entries(rng, count, key_space=None):
    entries = {}
    for _ in range(count):
        key = b"k%06d" % rng.randrange(key_space or count * 2)
        if rng.random() < 0.15:
            entries[key] = (TAG_DELETE, b"")
        else:
            entries[key] = (TAG_SET, rng.randbytes(rng.randrange(0, 200)))
    return dict(sorted(entries.items()))


def write_and_open(fs, entries, page_size=512, name="chunk.1"):
    assert write_chunk_from_entries(
        fs, name, ((k, t, v) for k, (t, v) in entries.items()), page_size, 0.10)
    return FileChunk(fs, name, PageCache(64), read_ahead=3)


class TestMemoryChunk:
    def test_basics(self):
        m = MemoryChunk()
        assert len(m) == 0
        assert m.middle_key() is None
        m.put(b"b", TAG_SET, b"1", log_segment=5, paxos_id=10)
        m.put(b"a", TAG_SET, b"2", log_segment=4, paxos_id=11)
        m.put(b"c", TAG_DELETE, b"", log_segment=6, paxos_id=12)
        assert m.get(b"a") == (TAG_SET, b"2")
        assert m.get(b"c") == (TAG_DELETE, b"")
        assert m.get(b"zzz") is None
        assert m.min_log_segment == 4
        assert m.first_paxos_id == 10
        assert [k for k, _, _ in m.iter_range()] == [b"a", b"b", b"c"]
        assert [k for k, _, _ in m.iter_range(reverse=True)] == [b"c", b"b", b"a"]
        assert [k for k, _, _ in m.iter_range(b"a", b"c")] == [b"a", b"b"]
        assert m.middle_key() == b"b"

    def test_overwrite_updates_size_accounting(self):
        m = MemoryChunk()
        m.put(b"k", TAG_SET, b"x" * 100)
        size_before = m.byte_size()
        m.put(b"k", TAG_SET, b"y")
        assert m.byte_size() == size_before - 99
        assert len(m) == 1

    def test_sorted_view_tracks_new_keys(self):
        m = MemoryChunk()
        rng = random.Random(1)
        keys = [b"%05d" % rng.randrange(10000) for _ in range(500)]
        for k in keys:
            m.put(k, TAG_SET, b"v")
            # interleave reads so the lazy sort rebuilds repeatedly
            assert m.sorted_keys() == sorted(set(m.entries))


class TestFileChunk:
    def test_round_trip_and_point_reads(self):
        rng = random.Random(42)
        fs = VirtualFileSystem()
        entries = make_entries(rng, 2000)
        chunk = write_and_open(fs, entries)
        assert chunk.num_keys == len(entries)
        keys = list(entries)
        assert chunk.smallest_key == keys[0]
        assert chunk.largest_key == keys[-1]
        assert chunk.middle_key == keys[len(keys) // 2]
        got = list(chunk.iter_range())
        assert [(k, t, v) for k, t, v in got] == [(k, t, v) for k, (t, v) in entries.items()]
        for k, (t, v) in entries.items():
            assert chunk.get(k) == (t, v)
        for i in range(500):
            absent = b"miss%05d" % i
            assert chunk.get(absent) is None

    def test_range_scans_match_model(self):
        rng = random.Random(7)
        fs = VirtualFileSystem()
        entries = make_entries(rng, 1500)
        chunk = write_and_open(fs, entries)
        keys = list(entries)
        for _ in range(60):
            lo = rng.choice(keys + [b"", b"k"])
            hi = rng.choice(keys + [b"", b"z"])
            expect = [(k, *entries[k]) for k in keys if (not lo or k >= lo) and (not hi or k < hi)]
            assert list(chunk.iter_range(lo, hi)) == expect
            assert list(chunk.iter_range(lo, hi, reverse=True)) == expect[::-1]

    def test_writer_rejects_disorder_and_duplicates(self):
        fs = VirtualFileSystem()
        w = FileChunkWriter(fs, "chunk.1", 512, 0.10)
        w.add(b"b", TAG_SET, b"1")
        with pytest.raises(ValueError):
            w.add(b"a", TAG_SET, b"2")
        with pytest.raises(ValueError):
            w.add(b"b", TAG_SET, b"3")
        w.abort()
        assert not fs.exists("chunk.1")
        assert not fs.exists("chunk.1.tmp")

    def test_empty_write_produces_no_file(self):
        fs = VirtualFileSystem()
        assert not write_chunk_from_entries(fs, "chunk.1", [], 512, 0.10)
        assert fs.list_names() == []

    def test_finished_file_is_immutable(self):
        fs = VirtualFileSystem()
        write_chunk_from_entries(fs, "chunk.1", [(b"a", TAG_SET, b"1")], 512, 0.10)
        with pytest.raises(AssertionError):
            fs.open_append("chunk.1").write(b"junk")

    def test_single_bit_corruption_never_goes_unnoticed(self):
        rng = random.Random(3)
        fs = VirtualFileSystem()
        entries = make_entries(rng, 400)
        write_and_open(fs, entries)
        clean = bytes(fs._files["chunk.1"].data)
        for _ in range(300):
            bit = rng.randrange(len(clean) * 8)
            corrupted = bytearray(clean)
            corrupted[bit // 8] ^= 1 << (bit % 8)
            fs._files["chunk.1"].data = corrupted
            fs._files["chunk.1"].immutable = False
            try:
                chunk = FileChunk(fs, "chunk.1")
                read_back = {}
                for k, t, v in chunk.iter_range():
                    read_back[k] = (t, v)
                for k, (t, v) in entries.items():
                    assert chunk.get(k) == (t, v)
            except CorruptChunk:
                continue
            # a flipped bit that every checksum missed must mean the read
            # still returned exactly the original data (flip in dead space)
            assert read_back == entries

    def test_truncated_file_rejected(self):
        fs = VirtualFileSystem()
        write_chunk_from_entries(fs, "chunk.1", [(b"a", TAG_SET, b"1")], 512, 0.10)
        data = fs._files["chunk.1"].data
        for cut in (0, 1, len(data) // 2, len(data) - 1):
            fs._files["chunk.1"].data = data[:cut]
            fs._files["chunk.1"].immutable = False
            with pytest.raises(CorruptChunk):
                FileChunk(fs, "chunk.1")
        fs._files["chunk.1"].data = data

    def test_page_cache_serves_repeat_reads(self):
        rng = random.Random(9)
        fs = VirtualFileSystem()
        entries = make_entries(rng, 300)
        chunk = write_and_open(fs, entries)
        key = list(entries)[150]
        chunk.get(key)
        before = fs.read_ops
        for _ in range(20):
            chunk.get(key)
        assert fs.read_ops == before

    def test_cache_eviction_bounded(self):
        cache = PageCache(4)
        for i in range(20):
            cache.put(("c", i), ([], []))
        assert len(cache._pages) == 4
        assert cache.get(("c", 19)) is not None
        assert cache.get(("c", 0)) is None

    def test_values_crossing_page_size(self):
        fs = VirtualFileSystem()
        big = [(b"k%d" % i, TAG_SET, bytes(2000)) for i in range(5)]
        chunk = write_and_open(fs, {k: (t, v) for k, t, v in big}, page_size=512)
        assert chunk.page_count == 5
        for k, t, v in big:
            assert chunk.get(k) == (t, v)
