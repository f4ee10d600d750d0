"""Sorted chunks: the in-memory kind and the immutable on-disk kind.

A file chunk is laid out as data pages, then an index page, a bloom
page, a header page, and a fixed trailer pointing back at the header.
Every page carries its own CRC32.  Entries are (key, tag, value) with
tag distinguishing a live value from a deletion marker; chunks keep
deletion markers because only a full merge may drop them.
"""

from __future__ import annotations

import bisect
import zlib
from dataclasses import dataclass

from ..codec import u16_fmt, u32_fmt, u64_fmt
from .bloom import BloomFilter
from .fs import FileSystem

TAG_SET = 0
TAG_DELETE = 1

CHUNK_MAGIC = 0x524B4348
CHUNK_VERSION = 1
TRAILER_SIZE = 8 + 4 + 4  # header offset, header size, magic


class CorruptChunk(Exception):
    """A page failed its CRC or the structure is inconsistent."""


# -- in-memory chunk --------------------------------------------------------

_ENTRY_OVERHEAD = 16


class MemoryChunk:
    """Mutable sorted map; newest state for keys written since serialization.

    Writes are dict-speed; the sorted key list is built lazily when a
    range read or serialization needs it.  Tracks the oldest redo segment
    and round that fed it so the engine knows which log files pin it and
    where replay may resume.
    """

    __slots__ = ("entries", "_sorted", "min_log_segment", "first_paxos_id", "_bytes")

    def __init__(self) -> None:
        self.entries: dict[bytes, tuple[int, bytes]] = {}
        self._sorted: list[bytes] | None = []
        self.min_log_segment: int | None = None
        self.first_paxos_id: int | None = None
        self._bytes = 0

    def __len__(self) -> int:
        return len(self.entries)

    def byte_size(self) -> int:
        return self._bytes

    def put(self, key: bytes, tag: int, value: bytes,
            log_segment: int | None = None, paxos_id: int | None = None) -> None:
        old = self.entries.get(key)
        if old is None:
            self._sorted = None
            self._bytes += len(key) + _ENTRY_OVERHEAD
        else:
            self._bytes -= len(old[1])
        self.entries[key] = (tag, value)
        self._bytes += len(value)
        if log_segment is not None:
            if self.min_log_segment is None or log_segment < self.min_log_segment:
                self.min_log_segment = log_segment
        if paxos_id is not None:
            if self.first_paxos_id is None or paxos_id < self.first_paxos_id:
                self.first_paxos_id = paxos_id

    def get(self, key: bytes) -> tuple[int, bytes] | None:
        return self.entries.get(key)

    def sorted_keys(self) -> list[bytes]:
        if self._sorted is None:
            self._sorted = sorted(self.entries)
        return self._sorted

    def iter_range(self, start: bytes = b"", end: bytes = b"", reverse: bool = False):
        keys = self.sorted_keys()
        lo = bisect.bisect_left(keys, start) if start else 0
        hi = bisect.bisect_left(keys, end) if end else len(keys)
        idx = range(lo, hi) if not reverse else range(hi - 1, lo - 1, -1)
        for i in idx:
            k = keys[i]
            tag, value = self.entries[k]
            yield k, tag, value

    def middle_key(self) -> bytes | None:
        if not self.entries:
            return None
        keys = self.sorted_keys()
        return keys[len(keys) // 2]


# -- page encoding ----------------------------------------------------------

def _seal_page(body: bytes) -> bytes:
    return u32_fmt.pack(zlib.crc32(body) & 0xFFFFFFFF) + body


def _open_page(raw: bytes, what: str) -> bytes:
    if len(raw) < 4:
        raise CorruptChunk(f"{what}: too short")
    stored = u32_fmt.unpack(raw[:4])[0]
    body = raw[4:]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CorruptChunk(f"{what}: CRC mismatch")
    return body


def _encode_entry(key: bytes, tag: int, value: bytes) -> bytes:
    head = bytes([tag]) + u16_fmt.pack(len(key)) + key
    if tag == TAG_SET:
        return head + u32_fmt.pack(len(value)) + value
    return head


def _parse_entries(body: bytes, count: int, what: str):
    keys: list[bytes] = []
    entries: list[tuple[int, bytes]] = []
    pos = 0
    try:
        for _ in range(count):
            tag = body[pos]
            pos += 1
            klen = u16_fmt.unpack_from(body, pos)[0]
            pos += 2
            keys.append(body[pos:pos + klen])
            pos += klen
            if tag == TAG_SET:
                vlen = u32_fmt.unpack_from(body, pos)[0]
                pos += 4
                entries.append((tag, body[pos:pos + vlen]))
                pos += vlen
            else:
                entries.append((tag, b""))
    except (IndexError, zlib.error) as exc:  # pragma: no cover - CRC catches first
        raise CorruptChunk(f"{what}: truncated entry") from exc
    if pos != len(body):
        raise CorruptChunk(f"{what}: trailing bytes")
    return keys, entries


@dataclass
class _IndexEntry:
    first_key: bytes
    offset: int
    size: int


# -- file chunk writer ------------------------------------------------------

class FileChunkWriter:
    """Streams sorted unique entries into the on-disk layout."""

    def __init__(self, fs: FileSystem, name: str, page_size: int, fp_rate: float) -> None:
        self._fs = fs
        self._name = name
        self._tmp = name + ".tmp"
        self._page_size = page_size
        self._fp_rate = fp_rate
        fs.delete(self._tmp)
        self._file = fs.open_append(self._tmp)
        self._offset = 0
        self._page: list[bytes] = []
        self._page_first: bytes | None = None
        self._page_bytes = 0
        self._index: list[_IndexEntry] = []
        self._page_count = 0
        self._keys: list[bytes] = []
        self._last_key: bytes | None = None

    def add(self, key: bytes, tag: int, value: bytes) -> None:
        if self._last_key is not None and key <= self._last_key:
            raise ValueError("entries must arrive in strictly increasing key order")
        self._last_key = key
        self._keys.append(key)
        enc = _encode_entry(key, tag, value)
        if self._page_bytes and self._page_bytes + len(enc) > self._page_size:
            self._flush_page()
        if self._page_first is None:
            self._page_first = key
        self._page.append(enc)
        self._page_count += 1
        self._page_bytes += len(enc)

    def _flush_page(self) -> None:
        if not self._page:
            return
        body = u16_fmt.pack(self._page_count) + b"".join(self._page)
        raw = _seal_page(body)
        self._index.append(_IndexEntry(self._page_first, self._offset, len(raw)))
        self._file.write(raw)
        self._offset += len(raw)
        self._page = []
        self._page_first = None
        self._page_bytes = 0
        self._page_count = 0

    def abort(self) -> None:
        self._file.close()
        self._fs.delete(self._tmp)

    def finish(self) -> bool:
        """Completes the file; False when no entries were added."""
        self._flush_page()
        if not self._keys:
            self.abort()
            return False
        # index page
        parts = [u32_fmt.pack(len(self._index))]
        for ent in self._index:
            parts.append(u16_fmt.pack(len(ent.first_key)))
            parts.append(ent.first_key)
            parts.append(u64_fmt.pack(ent.offset))
            parts.append(u32_fmt.pack(ent.size))
        index_raw = _seal_page(b"".join(parts))
        index_offset = self._offset
        self._file.write(index_raw)
        self._offset += len(index_raw)
        # bloom page
        bf = BloomFilter.for_keys(len(self._keys), self._fp_rate)
        for k in self._keys:
            bf.add(k)
        bloom_raw = _seal_page(u64_fmt.pack(bf.bits) + u32_fmt.pack(bf.num_hashes) + bytes(bf.data))
        bloom_offset = self._offset
        self._file.write(bloom_raw)
        self._offset += len(bloom_raw)
        # header page: smallest, largest, middle key and page directory
        smallest = self._keys[0]
        largest = self._keys[-1]
        middle = self._keys[len(self._keys) // 2]
        body = b"".join([
            u64_fmt.pack(len(self._keys)),
            u16_fmt.pack(len(smallest)), smallest,
            u16_fmt.pack(len(largest)), largest,
            u16_fmt.pack(len(middle)), middle,
            u64_fmt.pack(index_offset), u32_fmt.pack(len(index_raw)),
            u64_fmt.pack(bloom_offset), u32_fmt.pack(len(bloom_raw)),
        ])
        header_raw = u32_fmt.pack(CHUNK_MAGIC) + u16_fmt.pack(CHUNK_VERSION) + _seal_page(body)
        header_offset = self._offset
        self._file.write(header_raw)
        self._offset += len(header_raw)
        self._file.write(u64_fmt.pack(header_offset) + u32_fmt.pack(len(header_raw))
                         + u32_fmt.pack(CHUNK_MAGIC))
        self._file.sync()
        self._file.close()
        self._fs.delete(self._name)
        self._fs.rename(self._tmp, self._name)
        self._fs.mark_immutable(self._name)
        return True


def write_chunk_from_entries(fs: FileSystem, name: str, entries, page_size: int,
                             fp_rate: float) -> bool:
    """entries: iterable of (key, tag, value) in strictly increasing key order."""
    w = FileChunkWriter(fs, name, page_size, fp_rate)
    try:
        for key, tag, value in entries:
            w.add(key, tag, value)
        return w.finish()
    except BaseException:
        w.abort()
        raise


# -- file chunk reader ------------------------------------------------------

class PageCache:
    """LRU over parsed data pages, shared by all chunks of one engine."""

    def __init__(self, max_pages: int) -> None:
        self.max_pages = max_pages
        self._pages: dict[tuple[str, int], tuple[list[bytes], list[tuple[int, bytes]]]] = {}

    def get(self, key: tuple[str, int]):
        page = self._pages.get(key)
        if page is not None:
            # move to the back to mark recent use
            del self._pages[key]
            self._pages[key] = page
        return page

    def put(self, key: tuple[str, int], page) -> None:
        if key in self._pages:
            del self._pages[key]
        self._pages[key] = page
        while len(self._pages) > self.max_pages:
            oldest = next(iter(self._pages))
            del self._pages[oldest]

    def drop_chunk(self, name: str) -> None:
        for key in [k for k in self._pages if k[0] == name]:
            del self._pages[key]


class FileChunk:
    """Random and range access to one immutable chunk file."""

    def __init__(self, fs: FileSystem, name: str, cache: PageCache | None = None,
                 read_ahead: int = 1) -> None:
        self.name = name
        self._fs = fs
        self._file = fs.open_read(name)
        self._cache = cache
        self._read_ahead = max(1, read_ahead)
        self.file_size = self._file.size()
        self._load_meta()

    def _load_meta(self) -> None:
        size = self.file_size
        if size < TRAILER_SIZE:
            raise CorruptChunk(f"{self.name}: shorter than trailer")
        trailer = self._file.pread(size - TRAILER_SIZE, TRAILER_SIZE)
        header_offset = u64_fmt.unpack_from(trailer, 0)[0]
        header_size = u32_fmt.unpack_from(trailer, 8)[0]
        magic = u32_fmt.unpack_from(trailer, 12)[0]
        if magic != CHUNK_MAGIC or header_offset + header_size + TRAILER_SIZE != size:
            raise CorruptChunk(f"{self.name}: bad trailer")
        header_raw = self._file.pread(header_offset, header_size)
        if u32_fmt.unpack_from(header_raw, 0)[0] != CHUNK_MAGIC:
            raise CorruptChunk(f"{self.name}: bad header magic")
        version = u16_fmt.unpack_from(header_raw, 4)[0]
        if version != CHUNK_VERSION:
            raise CorruptChunk(f"{self.name}: unsupported version {version}")
        body = _open_page(header_raw[6:], f"{self.name} header")
        pos = 0
        self.num_keys = u64_fmt.unpack_from(body, pos)[0]
        pos += 8
        klen = u16_fmt.unpack_from(body, pos)[0]
        pos += 2
        self.smallest_key = body[pos:pos + klen]
        pos += klen
        klen = u16_fmt.unpack_from(body, pos)[0]
        pos += 2
        self.largest_key = body[pos:pos + klen]
        pos += klen
        klen = u16_fmt.unpack_from(body, pos)[0]
        pos += 2
        self.middle_key = body[pos:pos + klen]
        pos += klen
        index_offset = u64_fmt.unpack_from(body, pos)[0]
        pos += 8
        index_size = u32_fmt.unpack_from(body, pos)[0]
        pos += 4
        bloom_offset = u64_fmt.unpack_from(body, pos)[0]
        pos += 8
        bloom_size = u32_fmt.unpack_from(body, pos)[0]

        index_body = _open_page(self._file.pread(index_offset, index_size),
                                f"{self.name} index")
        count = u32_fmt.unpack_from(index_body, 0)[0]
        ipos = 4
        self._page_keys: list[bytes] = []
        self._page_locs: list[tuple[int, int]] = []
        for _ in range(count):
            klen = u16_fmt.unpack_from(index_body, ipos)[0]
            ipos += 2
            self._page_keys.append(index_body[ipos:ipos + klen])
            ipos += klen
            off = u64_fmt.unpack_from(index_body, ipos)[0]
            ipos += 8
            sz = u32_fmt.unpack_from(index_body, ipos)[0]
            ipos += 4
            self._page_locs.append((off, sz))
        if ipos != len(index_body):
            raise CorruptChunk(f"{self.name}: index trailing bytes")

        bloom_body = _open_page(self._file.pread(bloom_offset, bloom_size),
                                f"{self.name} bloom")
        bits = u64_fmt.unpack_from(bloom_body, 0)[0]
        hashes = u32_fmt.unpack_from(bloom_body, 8)[0]
        self.bloom = BloomFilter(bits, hashes, bytearray(bloom_body[12:]))

    def close(self) -> None:
        if self._cache is not None:
            self._cache.drop_chunk(self.name)
        self._file.close()

    def read_raw(self, offset: int, length: int) -> bytes:
        """Raw file bytes, for copying the chunk to another node."""
        return self._file.pread(offset, length)

    @property
    def page_count(self) -> int:
        return len(self._page_locs)

    def _read_page(self, idx: int):
        cache_key = (self.name, idx)
        if self._cache is not None:
            hit = self._cache.get(cache_key)
            if hit is not None:
                return hit
        off, sz = self._page_locs[idx]
        raw = self._file.pread(off, sz)
        page = self._parse_page(raw, idx)
        if self._cache is not None:
            self._cache.put(cache_key, page)
        return page

    def _parse_page(self, raw: bytes, idx: int):
        body = _open_page(raw, f"{self.name} page {idx}")
        count = u16_fmt.unpack_from(body, 0)[0]
        return _parse_entries(body[2:], count, f"{self.name} page {idx}")

    def _read_pages_batch(self, first: int, count: int):
        """Sequential page fetch in one read; used by range iteration."""
        last = min(first + count, len(self._page_locs)) - 1
        start_off = self._page_locs[first][0]
        end_off = self._page_locs[last][0] + self._page_locs[last][1]
        raw = self._file.pread(start_off, end_off - start_off)
        out = []
        for idx in range(first, last + 1):
            off, sz = self._page_locs[idx]
            rel = off - start_off
            page = self._parse_page(raw[rel:rel + sz], idx)
            if self._cache is not None:
                self._cache.put((self.name, idx), page)
            out.append(page)
        return out

    def get(self, key: bytes) -> tuple[int, bytes] | None:
        if not self._page_keys:
            return None
        if key < self.smallest_key or key > self.largest_key:
            return None
        if not self.bloom.may_contain(key):
            return None
        idx = bisect.bisect_right(self._page_keys, key) - 1
        if idx < 0:
            return None
        keys, entries = self._read_page(idx)
        i = bisect.bisect_left(keys, key)
        if i < len(keys) and keys[i] == key:
            return entries[i]
        return None

    def iter_range(self, start: bytes = b"", end: bytes = b"", reverse: bool = False):
        if not self._page_keys:
            return
        if not reverse:
            first = bisect.bisect_right(self._page_keys, start) - 1 if start else 0
            first = max(0, first)
            idx = first
            while idx < len(self._page_locs):
                batch = self._read_pages_batch(idx, self._read_ahead)
                for keys, entries in batch:
                    lo = bisect.bisect_left(keys, start) if start else 0
                    for i in range(lo, len(keys)):
                        k = keys[i]
                        if end and k >= end:
                            return
                        tag, value = entries[i]
                        yield k, tag, value
                idx += len(batch)
        else:
            if end:
                last = bisect.bisect_left(self._page_keys, end)
                last = min(last, len(self._page_locs) - 1)
                # the page whose first key is < end may still matter
                while last > 0 and self._page_keys[last] >= end:
                    last -= 1
            else:
                last = len(self._page_locs) - 1
            for idx in range(last, -1, -1):
                keys, entries = self._read_page(idx)
                hi = bisect.bisect_left(keys, end) if end else len(keys)
                for i in range(hi - 1, -1, -1):
                    k = keys[i]
                    if start and k < start:
                        return
                    tag, value = entries[i]
                    yield k, tag, value
