"""Storage engine: tracks, shards, execution, maintenance, recovery.

One engine per node.  Each replication track (one per quorum the node
belongs to) owns regular shards holding table data plus one log shard
keyed by round number, so peers can be caught up from here.  All writes
enter through execute_round; durability is deferred to commit_track,
which is what lets the round commit ride the next round's disk write.

Chunk files are shared across shards after a split, so the engine
refcounts them and deletes a file only when no shard references it.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

from ..codec import u64_fmt, Reader, Writer
from ..config import Tunables
from ..types import Command, Opcode, ShardDescriptor, Status, decode_commands
from .chunk import (FileChunk, MemoryChunk, PageCache, TAG_DELETE, TAG_SET,
                    CorruptChunk, write_chunk_from_entries)
from .fs import DiskFullError, FileSystem
from .redolog import RedoLog, list_segment_ids, replay
from .toc import ShardToc, Toc, TocRecord, TrackToc, read_toc, write_toc

log = logging.getLogger(__name__)

CHUNK_PREFIX = "chunk."
INSTALL_PREFIX = "install."
SPLIT_ID_BIT = 1 << 63

Outcome = tuple[int, bytes]


class RecoveryError(Exception):
    """The on-disk state cannot be opened safely."""


def chunk_name(chunk_id: int) -> str:
    return f"{CHUNK_PREFIX}{chunk_id}"


def round_key(paxos_id: int) -> bytes:
    return u64_fmt.pack(paxos_id)


def prefix_successor(prefix: bytes) -> bytes:
    """Smallest byte string greater than every string with this prefix."""
    p = bytearray(prefix)
    while p and p[-1] == 0xFF:
        p.pop()
    if not p:
        return b""
    p[-1] += 1
    return bytes(p)


class ShardState:
    __slots__ = ("descriptor", "is_log", "mem", "chunk_ids", "covered")

    def __init__(self, descriptor: ShardDescriptor, is_log: bool = False) -> None:
        self.descriptor = descriptor
        self.is_log = is_log
        self.mem = MemoryChunk()
        self.chunk_ids: list[int] = []  # oldest first
        # every effect on this shard from rounds <= covered is inside
        # chunk_ids; redo replay skips those rounds for this shard, which
        # is what keeps a replayed Add from applying twice
        self.covered = 0


class TrackState:
    __slots__ = ("track_id", "last_executed", "durable_paxos_id",
                 "next_local_shard_id", "shards", "log_shard", "dedup")

    def __init__(self, track_id: int) -> None:
        self.track_id = track_id
        self.last_executed = 0
        self.durable_paxos_id = 0
        self.next_local_shard_id = 1
        self.shards: dict[int, ShardState] = {}
        self.log_shard = ShardState(ShardDescriptor(0, 0), is_log=True)
        # client_id -> request_id -> outcomes, bounded per client
        self.dedup: dict[int, OrderedDict[int, list[Outcome]]] = {}

    def next_paxos_id(self) -> int:
        return self.last_executed + 1

    def shards_of_table(self, table_id: int) -> list[ShardState]:
        out = [s for s in self.shards.values() if s.descriptor.table_id == table_id]
        out.sort(key=lambda s: (s.descriptor.first_key != b"", s.descriptor.first_key))
        return out

    def table_ids(self) -> list[int]:
        return sorted({s.descriptor.table_id for s in self.shards.values()})

    def find_shard(self, table_id: int, key: bytes) -> ShardState | None:
        for s in self.shards.values():
            if s.descriptor.table_id == table_id and s.descriptor.contains(key):
                return s
        return None


@dataclass
class EngineStats:
    reads: int = 0
    writes: int = 0
    merges: int = 0
    splits: int = 0
    serializations: int = 0
    rounds_executed: int = 0


class StorageEngine:
    def __init__(self, fs: FileSystem, tun: Tunables, fault_cb=None) -> None:
        self.fs = fs
        self.tun = tun
        self.fault_cb = fault_cb
        self.read_only = False
        self.fault_reason: str | None = None
        self.tracks: dict[int, TrackState] = {}
        self.chunks: dict[int, FileChunk] = {}
        self.refs: dict[int, int] = {}
        self.cache = PageCache(tun.page_cache_pages)
        self.next_chunk_id = 1
        self.stats = EngineStats()
        self.open_iterators = 0
        self._pending_deletes: list[int] = []
        self._reads_since_tick = 0
        self._read_rate = 0.0
        self._last_tick_ms: float | None = None
        self._serialize_blocked = False
        self.redo: RedoLog | None = None
        self._recover()

    # -- lifecycle -------------------------------------------------------

    def fault(self, reason: str) -> None:
        if self.fault_reason is None:
            self.fault_reason = reason
            self.read_only = True
            log.error("storage fault: %s", reason)
            if self.fault_cb is not None:
                self.fault_cb(reason)

    def close(self) -> None:
        if self.redo is not None:
            self.redo.close()
        for chunk in self.chunks.values():
            chunk.close()

    def ensure_track(self, track_id: int) -> TrackState:
        tr = self.tracks.get(track_id)
        if tr is None:
            tr = TrackState(track_id)
            self.tracks[track_id] = tr
        return tr

    # -- recovery --------------------------------------------------------

    def _open_chunk(self, chunk_id: int) -> FileChunk:
        chunk = self.chunks.get(chunk_id)
        if chunk is None:
            name = chunk_name(chunk_id)
            if not self.fs.exists(name):
                raise RecoveryError(f"chunk file {name} named by toc is missing")
            try:
                chunk = FileChunk(self.fs, name, self.cache, self.tun.read_ahead_pages)
            except CorruptChunk as exc:
                raise RecoveryError(str(exc)) from exc
            self.chunks[chunk_id] = chunk
            self.refs[chunk_id] = 0
        return chunk

    def _ref(self, chunk_id: int) -> None:
        self.refs[chunk_id] = self.refs.get(chunk_id, 0) + 1

    def _deref(self, chunk_id: int) -> None:
        """Drop one reference; the file is deleted only after the next
        table-of-contents write, so a crash in between leaves a toc whose
        chunk files all still exist."""
        self.refs[chunk_id] -= 1
        if self.refs[chunk_id] == 0:
            chunk = self.chunks.pop(chunk_id)
            chunk.close()
            del self.refs[chunk_id]
            self._pending_deletes.append(chunk_id)

    def _recover(self) -> None:
        toc = read_toc(self.fs)
        if toc is not None:
            self.next_chunk_id = toc.next_chunk_id
            for ttoc in toc.tracks:
                tr = self.ensure_track(ttoc.track_id)
                tr.durable_paxos_id = ttoc.durable_paxos_id
                tr.last_executed = ttoc.durable_paxos_id
                tr.next_local_shard_id = ttoc.next_local_shard_id
                for stoc in ttoc.shards:
                    state = ShardState(stoc.descriptor, stoc.is_log)
                    state.covered = stoc.covered_paxos_id
                    state.chunk_ids = list(stoc.chunk_ids)
                    for cid in stoc.chunk_ids:
                        self._open_chunk(cid)
                        self._ref(cid)
                    if stoc.is_log:
                        tr.log_shard = state
                    else:
                        tr.shards[state.descriptor.shard_id] = state
        # orphans: chunk files and temp files the toc does not know about
        for name in self.fs.list_names():
            if name.endswith(".tmp"):
                self.fs.delete(name)
            elif name.startswith(CHUNK_PREFIX):
                suffix = name[len(CHUNK_PREFIX):]
                if suffix.isdigit() and int(suffix) not in self.refs:
                    self.fs.delete(name)
            elif name.startswith(INSTALL_PREFIX):
                self.fs.delete(name)
        # replay the redo log; appends go to a fresh segment after the last
        existing = list_segment_ids(self.fs)
        next_segment = (existing[-1] + 1) if existing else 1
        self.redo = RedoLog(self.fs, self.tun.log_segment_size, next_segment)
        for sid, rec in replay(self.fs):
            tr = self.ensure_track(rec.track_id)
            if rec.paxos_id <= tr.durable_paxos_id:
                continue
            if rec.paxos_id != tr.last_executed + 1:
                # records from before a state-copy wipe of this track; the
                # wiped toc no longer accounts for them
                log.warning("skipping stale record for track %d round %d (have %d)",
                            rec.track_id, rec.paxos_id, tr.last_executed)
                continue
            self._apply_round(tr, rec.paxos_id, rec.value, sid)
        self.stats = EngineStats()

    # -- execution -------------------------------------------------------

    def execute_round(self, track_id: int, paxos_id: int, value: bytes) -> list[Outcome]:
        """Apply one learned round.  Leaves the redo record unsynced; the
        commit happens with the next round's persistence or an explicit
        commit_track call."""
        tr = self.ensure_track(track_id)
        if paxos_id != tr.last_executed + 1:
            raise ValueError(f"track {track_id}: executing {paxos_id} after {tr.last_executed}")
        segment = None
        try:
            segment = self.redo.append(track_id, paxos_id, value)
        except DiskFullError:
            self.fault("redo log append failed: disk full")
        outcomes = self._apply_round(tr, paxos_id, value, segment)
        self.stats.rounds_executed += 1
        self._after_write_checks(tr)
        return outcomes

    def _apply_round(self, tr: TrackState, paxos_id: int, value: bytes,
                     segment: int | None) -> list[Outcome]:
        commands = decode_commands(value)
        outcomes: list[Outcome] = []
        touched: dict[tuple[int, int], list[Outcome]] = {}
        replayed: dict[tuple[int, int], int] = {}
        for cmd in commands:
            pair = (cmd.client_id, cmd.request_id) if cmd.client_id else None
            if pair is not None and pair not in touched:
                # a request that already executed in an earlier round must
                # not apply twice (a second ADD would double-count), so its
                # recorded outcomes replay positionally instead
                window = tr.dedup.get(cmd.client_id)
                prior = window.get(cmd.request_id) if window is not None else None
                if prior is not None:
                    idx = replayed.get(pair, 0)
                    replayed[pair] = idx + 1
                    outcomes.append(prior[idx] if idx < len(prior) else (Status.OK, b""))
                    continue
            out = self._apply_command(tr, cmd, paxos_id, segment)
            outcomes.append(out)
            if pair is not None:
                touched.setdefault(pair, []).append(out)
        if paxos_id > tr.log_shard.covered:
            tr.log_shard.mem.put(round_key(paxos_id), TAG_SET, value, segment,
                                 paxos_id)
        tr.last_executed = paxos_id
        for (client_id, request_id), outs in touched.items():
            window = tr.dedup.setdefault(client_id, OrderedDict())
            window[request_id] = outs
            while len(window) > self.tun.dedup_window:
                window.popitem(last=False)
        return outcomes

    def _apply_command(self, tr: TrackState, cmd: Command, paxos_id: int,
                       segment: int | None) -> Outcome:
        op = cmd.opcode
        if op in (Opcode.SET, Opcode.DELETE, Opcode.ADD):
            shard = tr.find_shard(cmd.table_id, cmd.key)
            if shard is None:
                return (Status.UNKNOWN_TABLE, b"")
            if paxos_id <= shard.covered:
                # replay of a round whose effect on this shard is already
                # inside its chunk files; re-applying would double an Add
                if op == Opcode.ADD:
                    cur = self._get_in_shard(shard, cmd.key)
                    return (Status.OK, cur if cur is not None else b"")
                return (Status.OK, b"")
            if op == Opcode.SET:
                shard.mem.put(cmd.key, TAG_SET, cmd.value, segment, paxos_id)
                self.stats.writes += 1
                return (Status.OK, b"")
            if op == Opcode.DELETE:
                shard.mem.put(cmd.key, TAG_DELETE, b"", segment, paxos_id)
                self.stats.writes += 1
                return (Status.OK, b"")
            # ADD: unsigned decimal arithmetic materialized as a plain value
            current = self._get_in_shard(shard, cmd.key)
            if current is None:
                base = 0
            else:
                try:
                    base = int(current.decode("ascii"))
                    if base < 0:
                        raise ValueError
                except (ValueError, UnicodeDecodeError):
                    return (Status.VALUE_NOT_NUMERIC, b"")
            new = (base + cmd.num) % (1 << 64)
            encoded = str(new).encode("ascii")
            shard.mem.put(cmd.key, TAG_SET, encoded, segment, paxos_id)
            self.stats.writes += 1
            return (Status.OK, encoded)

        if op == Opcode.TRUNCATE:
            table = [s for s in tr.shards.values()
                     if s.descriptor.table_id == cmd.table_id]
            if not table:
                return (Status.UNKNOWN_TABLE, b"")
            if min(s.covered for s in table) >= paxos_id:
                # replayed truncate whose result is already durable; the
                # replacement shard (with its deterministic id) exists
                return (Status.OK, b"")
            self._drop_table_shards(tr, cmd.table_id)
            new_id = self._alloc_shard_id(tr)
            tr.shards[new_id] = ShardState(ShardDescriptor(new_id, cmd.table_id))
            return (Status.OK, b"")

        if op == Opcode.SPLIT_SHARD:
            self._exec_split(tr, cmd.num, cmd.key)
            return (Status.OK, b"")

        if op == Opcode.ADOPT_TABLE:
            if not any(s.descriptor.table_id == cmd.num for s in tr.shards.values()):
                tr.shards[cmd.num2] = ShardState(ShardDescriptor(cmd.num2, cmd.num))
            return (Status.OK, b"")

        if op == Opcode.DROP_TABLE:
            self._drop_table_shards(tr, cmd.num)
            return (Status.OK, b"")

        if op in (Opcode.TX_COMMIT, Opcode.NOOP):
            return (Status.OK, b"")

        return (Status.BAD_REQUEST, b"")

    def _alloc_shard_id(self, tr: TrackState) -> int:
        # split and truncate ids carry the track in the upper bits so they
        # never collide with controller-assigned table-creation ids
        new_id = SPLIT_ID_BIT | (tr.track_id << 32) | tr.next_local_shard_id
        tr.next_local_shard_id += 1
        return new_id

    def _drop_table_shards(self, tr: TrackState, table_id: int) -> None:
        for sid in [sid for sid, s in tr.shards.items()
                    if s.descriptor.table_id == table_id]:
            state = tr.shards.pop(sid)
            for cid in state.chunk_ids:
                self._deref(cid)

    def _exec_split(self, tr: TrackState, shard_id: int, split_key: bytes) -> None:
        shard = tr.shards.get(shard_id)
        if shard is None:
            return
        d = shard.descriptor
        if not d.contains(split_key) or split_key == d.first_key:
            return
        right_id = self._alloc_shard_id(tr)
        left = ShardState(ShardDescriptor(d.shard_id, d.table_id, d.first_key,
                                          split_key, True))
        right = ShardState(ShardDescriptor(right_id, d.table_id, split_key,
                                           d.last_key, True))
        left.covered = right.covered = shard.covered
        left.chunk_ids = list(shard.chunk_ids)
        right.chunk_ids = list(shard.chunk_ids)
        for cid in shard.chunk_ids:
            self._ref(cid)  # right's extra reference; left inherits shard's
        lm, rm = left.mem, right.mem
        for key, tag, value in shard.mem.iter_range():
            target = lm if key < split_key else rm
            target.put(key, tag, value,
                       shard.mem.min_log_segment, shard.mem.first_paxos_id)
        del tr.shards[shard_id]
        tr.shards[left.descriptor.shard_id] = left
        tr.shards[right.descriptor.shard_id] = right
        self.stats.splits += 1

    # -- reads -----------------------------------------------------------

    def _get_in_shard(self, shard: ShardState, key: bytes) -> bytes | None:
        hit = shard.mem.get(key)
        if hit is not None:
            tag, value = hit
            return value if tag == TAG_SET else None
        for cid in reversed(shard.chunk_ids):
            try:
                hit = self.chunks[cid].get(key)
            except CorruptChunk as exc:
                self.fault(f"chunk {cid} corrupt: {exc}")
                return None
            if hit is not None:
                tag, value = hit
                return value if tag == TAG_SET else None
        return None

    def get(self, track_id: int, table_id: int, key: bytes) -> tuple[Status, bytes]:
        tr = self.tracks.get(track_id)
        self.stats.reads += 1
        self._reads_since_tick += 1
        if tr is None or not any(s.descriptor.table_id == table_id
                                 for s in tr.shards.values()):
            return (Status.UNKNOWN_TABLE, b"")
        shard = tr.find_shard(table_id, key)
        if shard is None:
            return (Status.NOT_FOUND, b"")
        value = self._get_in_shard(shard, key)
        if value is None:
            return (Status.NOT_FOUND, b"")
        return (Status.OK, value)

    def _merged_shard_iter(self, shard: ShardState, lo: bytes, hi: bytes,
                           reverse: bool):
        """Newest-wins merge of the memory chunk and file chunks."""
        sources = [shard.mem.iter_range(lo, hi, reverse)]
        for cid in reversed(shard.chunk_ids):
            sources.append(self.chunks[cid].iter_range(lo, hi, reverse))
        heads: list[tuple[bytes, int, bytes] | None] = []
        for src in sources:
            heads.append(next(src, None))
        iters = sources
        while True:
            best = -1
            for i, head in enumerate(heads):
                if head is None:
                    continue
                if best < 0:
                    best = i
                    continue
                if (head[0] < heads[best][0]) != reverse and head[0] != heads[best][0]:
                    best = i
            if best < 0:
                return
            key, tag, value = heads[best]
            yield key, tag, value
            for i in range(len(heads)):
                while heads[i] is not None and heads[i][0] == key:
                    heads[i] = next(iters[i], None)

    def list_range(self, track_id: int, table_id: int, start: bytes = b"",
                   end: bytes = b"", prefix: bytes = b"", count: int = 0,
                   reverse: bool = False, count_only: bool = False,
                   ) -> tuple[Status, list[tuple[bytes, bytes]], int]:
        tr = self.tracks.get(track_id)
        self.stats.reads += 1
        self._reads_since_tick += 1
        if tr is None or not any(s.descriptor.table_id == table_id
                                 for s in tr.shards.values()):
            return (Status.UNKNOWN_TABLE, [], 0)
        lo, hi = start, end
        if prefix:
            if not lo or lo < prefix:
                lo = prefix
            succ = prefix_successor(prefix)
            if succ and (not hi or hi > succ):
                hi = succ
        shards = tr.shards_of_table(table_id)
        if reverse:
            shards = list(reversed(shards))
        items: list[tuple[bytes, bytes]] = []
        total = 0
        self.open_iterators += 1
        try:
            for shard in shards:
                d = shard.descriptor
                slo = lo
                shi = hi
                if d.first_key and (not slo or slo < d.first_key):
                    slo = d.first_key
                if d.last_key and (not shi or shi > d.last_key):
                    shi = d.last_key
                if shi and slo and slo >= shi:
                    continue
                for key, tag, value in self._merged_shard_iter(shard, slo, shi, reverse):
                    if tag == TAG_DELETE:
                        continue
                    if prefix and not key.startswith(prefix):
                        continue
                    total += 1
                    if not count_only:
                        items.append((key, value))
                    if count and total >= count:
                        return (Status.OK, items, total)
        finally:
            self.open_iterators -= 1
        return (Status.OK, items, total)

    # -- durability ------------------------------------------------------

    def commit_track(self, track_id: int) -> None:
        """Make every executed round on this node durable (the redo log is
        shared, so this commits other tracks' recent rounds too)."""
        try:
            self.redo.sync()
        except DiskFullError:
            self.fault("redo log sync failed: disk full")

    def durable_marker(self, tr: TrackState) -> int:
        firsts = []
        for shard in list(tr.shards.values()) + [tr.log_shard]:
            if len(shard.mem) and shard.mem.first_paxos_id is not None:
                firsts.append(shard.mem.first_paxos_id)
        if not firsts:
            return tr.last_executed
        return max(tr.durable_paxos_id, min(firsts) - 1)

    def _covered_now(self, tr: TrackState, shard: ShardState) -> int:
        """Round through which this shard's chunks are complete, right now:
        everything below the oldest unserialized effect, or everything."""
        if len(shard.mem) and shard.mem.first_paxos_id is not None:
            return shard.mem.first_paxos_id - 1
        return tr.last_executed

    def write_toc(self) -> None:
        toc = Toc(next_chunk_id=self.next_chunk_id)
        for tr in self.tracks.values():
            tr.durable_paxos_id = self.durable_marker(tr)
            ttoc = TrackToc(track_id=tr.track_id,
                            durable_paxos_id=tr.durable_paxos_id,
                            next_local_shard_id=tr.next_local_shard_id)
            for shard in tr.shards.values():
                ttoc.shards.append(ShardToc(shard.descriptor, list(shard.chunk_ids),
                                            covered_paxos_id=self._covered_now(tr, shard)))
            if tr.log_shard.chunk_ids:
                ttoc.shards.append(ShardToc(tr.log_shard.descriptor,
                                            list(tr.log_shard.chunk_ids), is_log=True,
                                            covered_paxos_id=self._covered_now(tr, tr.log_shard)))
            toc.tracks.append(ttoc)
        try:
            write_toc(self.fs, toc)
        except DiskFullError:
            self.fault("toc write failed: disk full")
            return
        for cid in self._pending_deletes:
            self.fs.delete(chunk_name(cid))
        self._pending_deletes.clear()

    # -- serialization and log trimming ----------------------------------

    def serialize_shard(self, tr: TrackState, shard: ShardState) -> bool:
        if not len(shard.mem):
            return True
        cid = self.next_chunk_id
        name = chunk_name(cid)
        try:
            wrote = write_chunk_from_entries(self.fs, name, shard.mem.iter_range(),
                                             self.tun.data_page_size,
                                             self.tun.bloom_fp_target)
        except DiskFullError:
            self._serialize_blocked = True
            log.warning("serialization of shard %d blocked: disk full",
                        shard.descriptor.shard_id)
            return False
        self._serialize_blocked = False
        self.next_chunk_id += 1
        if wrote:
            self.chunks[cid] = FileChunk(self.fs, name, self.cache,
                                         self.tun.read_ahead_pages)
            self.refs[cid] = 0
            shard.chunk_ids.append(cid)
            self._ref(cid)
        shard.mem = MemoryChunk()
        shard.covered = tr.last_executed
        self.stats.serializations += 1
        self.write_toc()
        self._purge_segments()
        if shard.is_log:
            self._trim_log_shard(tr)
        return True

    def serialize_all(self, tr: TrackState) -> None:
        # the redo log must be durable before its contents move into
        # chunks and the covering segments become deletable
        self.commit_track(tr.track_id)
        for shard in list(tr.shards.values()):
            self.serialize_shard(tr, shard)
        self.serialize_shard(tr, tr.log_shard)

    def _pinned_segment(self) -> int | None:
        pins = []
        for tr in self.tracks.values():
            for shard in list(tr.shards.values()) + [tr.log_shard]:
                if len(shard.mem) and shard.mem.min_log_segment is not None:
                    pins.append(shard.mem.min_log_segment)
        return min(pins) if pins else None

    def _purge_segments(self) -> None:
        pinned = self._pinned_segment()
        keep_from = pinned if pinned is not None else self.redo.current_segment_id
        self.redo.delete_below(keep_from)

    def _trim_log_shard(self, tr: TrackState) -> None:
        shard = tr.log_shard
        while len(shard.chunk_ids) > 1:
            total = sum(self.chunks[cid].file_size for cid in shard.chunk_ids)
            if total <= self.tun.log_retention_bytes:
                break
            oldest = shard.chunk_ids.pop(0)
            self._deref(oldest)
        self.write_toc()

    def _after_write_checks(self, tr: TrackState) -> None:
        for shard in list(tr.shards.values()) + [tr.log_shard]:
            if shard.mem.byte_size() >= self.tun.chunk_size_target:
                # serialization needs the covered redo records durable first
                self.commit_track(tr.track_id)
                self.serialize_shard(tr, shard)
        self._enforce_redo_cap()

    def _enforce_redo_cap(self) -> None:
        while self.redo.total_size() > self.tun.redo_log_cap:
            pinned = self._pinned_segment()
            if pinned is None or pinned == self.redo.current_segment_id:
                break
            progressed = False
            for tr in self.tracks.values():
                for shard in list(tr.shards.values()) + [tr.log_shard]:
                    if len(shard.mem) and shard.mem.min_log_segment == pinned:
                        self.commit_track(tr.track_id)
                        if self.serialize_shard(tr, shard):
                            progressed = True
            if not progressed:
                break

    # -- merge and split -------------------------------------------------

    def merge_shard(self, tr: TrackState, shard: ShardState,
                    chunk_ids: list[int] | None = None) -> bool:
        """Merge file chunks; a full merge (the default) elides deletion
        markers and drops keys outside the shard range.  All-or-nothing:
        the chunk list swaps only after the merged file is durable."""
        inputs = list(shard.chunk_ids) if chunk_ids is None else list(chunk_ids)
        if not inputs:
            return True
        full = inputs == shard.chunk_ids
        d = shard.descriptor
        cid = self.next_chunk_id
        name = chunk_name(cid)

        def merged_entries():
            sources = [self.chunks[c].iter_range(d.first_key, d.last_key)
                       for c in reversed(inputs)]
            heads = [next(s, None) for s in sources]
            while True:
                best = -1
                for i, head in enumerate(heads):
                    if head is None:
                        continue
                    if best < 0 or head[0] < heads[best][0]:
                        best = i
                if best < 0:
                    return
                key, tag, value = heads[best]
                for i in range(len(heads)):
                    while heads[i] is not None and heads[i][0] == key:
                        heads[i] = next(sources[i], None)
                if full and tag == TAG_DELETE:
                    continue
                yield key, tag, value

        try:
            wrote = write_chunk_from_entries(self.fs, name, merged_entries(),
                                             self.tun.data_page_size,
                                             self.tun.bloom_fp_target)
        except DiskFullError:
            log.warning("merge of shard %d blocked: disk full", d.shard_id)
            return False
        except CorruptChunk as exc:
            self.fault(f"merge read failed: {exc}")
            return False
        self.next_chunk_id += 1
        new_ids: list[int] = []
        if wrote:
            self.chunks[cid] = FileChunk(self.fs, name, self.cache,
                                         self.tun.read_ahead_pages)
            self.refs[cid] = 0
            new_ids = [cid]
        if full:
            replaced = shard.chunk_ids
            shard.chunk_ids = new_ids
        else:
            idx = shard.chunk_ids.index(inputs[0])
            replaced = inputs
            shard.chunk_ids = (shard.chunk_ids[:idx] + new_ids
                               + shard.chunk_ids[idx + len(inputs):])
        for c in new_ids:
            self._ref(c)
        for c in replaced:
            self._deref(c)
        self.write_toc()
        self.stats.merges += 1
        return True

    def shard_physical_size(self, shard: ShardState) -> int:
        # a shared chunk counts fully against every shard referencing it
        return (sum(self.chunks[c].file_size for c in shard.chunk_ids)
                + shard.mem.byte_size())

    def _shard_out_of_range(self, shard: ShardState) -> bool:
        d = shard.descriptor
        for cid in shard.chunk_ids:
            chunk = self.chunks[cid]
            if d.first_key and chunk.smallest_key < d.first_key:
                return True
            if d.last_key and chunk.largest_key >= d.last_key:
                return True
        return False

    def merge_tick(self, now_ms: float) -> bool:
        """Run at most one maintenance merge; returns True if one ran."""
        if self._last_tick_ms is not None and now_ms > self._last_tick_ms:
            dt = (now_ms - self._last_tick_ms) / 1000.0
            self._read_rate = self._reads_since_tick / dt
        self._last_tick_ms = now_ms
        self._reads_since_tick = 0
        if self.read_only:
            return False
        if self.open_iterators > 0:
            return False
        if self._read_rate > self.tun.merge_pause_reads_per_s:
            # heavy read traffic; merging now would evict its working set
            return False
        candidates: list[tuple[int, TrackState, ShardState]] = []
        for tr in self.tracks.values():
            for shard in tr.shards.values():
                eligible = (len(shard.chunk_ids) > self.tun.merge_min_chunks
                            or (shard.descriptor.is_split_result
                                and self._shard_out_of_range(shard)))
                if eligible:
                    candidates.append((self.shard_physical_size(shard), tr, shard))
        if self._serialize_blocked and not candidates:
            # retry the blocked serialization once merges cannot free space
            for tr in self.tracks.values():
                for shard in list(tr.shards.values()) + [tr.log_shard]:
                    if shard.mem.byte_size() >= self.tun.chunk_size_target:
                        self.serialize_shard(tr, shard)
            return False
        if not candidates:
            return False
        candidates.sort(key=lambda c: (-c[0], c[2].descriptor.shard_id))
        _, tr, shard = candidates[0]
        return self.merge_shard(tr, shard)

    def compute_split(self, track_id: int) -> tuple[int, bytes] | None:
        """Pick a shard over the size threshold and a median split key."""
        tr = self.tracks.get(track_id)
        if tr is None:
            return None
        for shard in sorted(tr.shards.values(),
                            key=lambda s: -self.shard_physical_size(s)):
            if self.shard_physical_size(shard) < self.tun.shard_split_size:
                continue
            d = shard.descriptor
            middles: list[bytes] = []
            for cid in shard.chunk_ids:
                middles.append(self.chunks[cid].middle_key)
            mem_mid = shard.mem.middle_key()
            if mem_mid is not None:
                middles.append(mem_mid)
            middles = sorted(m for m in middles if d.contains(m))
            if not middles:
                continue
            candidates = middles[len(middles) // 2:] + middles[:len(middles) // 2]
            for cand in candidates:
                if cand == d.first_key or not d.contains(cand):
                    continue
                # an entry strictly below the candidate guarantees both
                # halves come out non-empty
                below = next(self._merged_shard_iter(shard, d.first_key,
                                                     cand, False), None)
                if below is not None:
                    return (d.shard_id, cand)
            # degenerate distribution: defer until the data spreads out
        return None

    # -- round log access ------------------------------------------------

    def round_value(self, track_id: int, paxos_id: int) -> bytes | None:
        tr = self.tracks.get(track_id)
        if tr is None:
            return None
        return self._get_in_shard(tr.log_shard, round_key(paxos_id))

    def oldest_round_available(self, track_id: int) -> int:
        """Smallest round retrievable here; next_paxos_id when none are."""
        tr = self.tracks.get(track_id)
        if tr is None:
            return 1
        candidates = []
        if tr.log_shard.chunk_ids:
            oldest = self.chunks[tr.log_shard.chunk_ids[0]]
            candidates.append(u64_fmt.unpack(oldest.smallest_key)[0])
        keys = tr.log_shard.mem.sorted_keys()
        if keys:
            candidates.append(u64_fmt.unpack(keys[0])[0])
        return min(candidates) if candidates else tr.next_paxos_id()

    def cached_outcomes(self, track_id: int, client_id: int,
                        request_id: int) -> list[Outcome] | None:
        tr = self.tracks.get(track_id)
        if tr is None:
            return None
        window = tr.dedup.get(client_id)
        if window is None:
            return None
        return window.get(request_id)

    # -- track shard reporting ------------------------------------------

    def shard_report(self, track_id: int) -> list[ShardDescriptor]:
        tr = self.tracks.get(track_id)
        if tr is None:
            return []
        return [s.descriptor for s in tr.shards.values()]

    # -- catchup ---------------------------------------------------------

    def catchup_snapshot(self, track_id: int) -> tuple[int, bytes]:
        """Serialize everything and describe the track for a state copy."""
        tr = self.ensure_track(track_id)
        self.serialize_all(tr)
        w = Writer()
        w.u64(tr.last_executed)
        w.u64(tr.next_local_shard_id)
        shards = list(tr.shards.values()) + [tr.log_shard]
        w.u32(len(shards))
        for shard in shards:
            shard.descriptor.encode(w)
            w.u8(1 if shard.is_log else 0)
            w.u32(len(shard.chunk_ids))
            for cid in shard.chunk_ids:
                w.u64(cid)
                w.u64(self.chunks[cid].file_size)
        return tr.last_executed, w.getvalue()

    def read_chunk_slice(self, chunk_id: int, offset: int, length: int) -> bytes:
        return self.chunks[chunk_id].read_raw(offset, length)

    def wipe_track(self, track_id: int) -> None:
        tr = self.ensure_track(track_id)
        for shard in list(tr.shards.values()):
            for cid in shard.chunk_ids:
                self._deref(cid)
        for cid in tr.log_shard.chunk_ids:
            self._deref(cid)
        fresh = TrackState(track_id)
        self.tracks[track_id] = fresh
        self.write_toc()
        self._purge_segments()

    @staticmethod
    def manifest_chunks(manifest: bytes) -> list[tuple[int, int]]:
        """(chunk_id, size) pairs named by a snapshot manifest."""
        _, _, shards = _parse_manifest(manifest)
        out: dict[int, int] = {}
        for _, _, chunks in shards:
            for cid, size in chunks:
                out[cid] = size
        return sorted(out.items())

    # -- dumps and inspection --------------------------------------------

    def dump_track(self, track_id: int) -> bytes:
        """Canonical user-visible state: every table's live rows plus the
        last executed round.  The round log is excluded because retention
        trimming is a local decision."""
        tr = self.tracks.get(track_id)
        w = Writer()
        if tr is None:
            w.u64(0)
            w.u32(0)
            return w.getvalue()
        w.u64(tr.last_executed)
        table_ids = tr.table_ids()
        w.u32(len(table_ids))
        for table_id in table_ids:
            w.u64(table_id)
            _, items, total = self.list_range(track_id, table_id)
            w.u32(total)
            for key, value in items:
                w.bytes_(key)
                w.bytes_(value)
        return w.getvalue()


def _parse_manifest(manifest: bytes):
    r = Reader(manifest)
    last_executed = r.u64()
    next_local_shard_id = r.u64()
    shards = []
    for _ in range(r.u32()):
        descriptor = ShardDescriptor.decode(r)
        is_log = bool(r.u8())
        chunks = [(r.u64(), r.u64()) for _ in range(r.u32())]
        shards.append((descriptor, is_log, chunks))
    return last_executed, next_local_shard_id, shards


class InstallSession:
    """Receiver side of a full-state copy.

    The local track is wiped up front (and that wipe made durable), the
    sender's chunk files stream into staging files, and only a complete,
    verified set swaps in.  A crash mid-install leaves an empty track, and
    the next catchup attempt starts over.
    """

    def __init__(self, engine: StorageEngine, track_id: int, snap_paxos_id: int,
                 manifest: bytes) -> None:
        self.engine = engine
        self.track_id = track_id
        self.snap_paxos_id = snap_paxos_id
        (self._last_executed, self._next_local_shard_id,
         self._shards) = _parse_manifest(manifest)
        if self._last_executed != snap_paxos_id:
            raise ValueError("manifest round does not match snapshot round")
        engine.wipe_track(track_id)
        self._sizes = dict(StorageEngine.manifest_chunks(manifest))
        self._files: dict[int, object] = {}
        self._received: dict[int, int] = {}

    @staticmethod
    def _staging_name(chunk_id: int) -> str:
        return f"{INSTALL_PREFIX}{chunk_id}"

    def chunk_data(self, chunk_id: int, offset: int, data: bytes) -> None:
        if chunk_id not in self._sizes:
            raise ValueError(f"chunk {chunk_id} not in manifest")
        if offset != self._received.get(chunk_id, 0):
            raise ValueError(f"chunk {chunk_id}: expected offset "
                             f"{self._received.get(chunk_id, 0)}, got {offset}")
        f = self._files.get(chunk_id)
        if f is None:
            self.engine.fs.delete(self._staging_name(chunk_id))
            f = self.engine.fs.open_append(self._staging_name(chunk_id))
            self._files[chunk_id] = f
        f.write(data)
        self._received[chunk_id] = offset + len(data)

    def complete(self) -> bool:
        return all(self._received.get(cid, 0) == size
                   for cid, size in self._sizes.items())

    def abort(self) -> None:
        for cid, f in self._files.items():
            f.close()
            self.engine.fs.delete(self._staging_name(cid))
        self._files.clear()

    def finish(self) -> None:
        """Verify and swap the received state in; raises on any defect."""
        if not self.complete():
            self.abort()
            raise ValueError("state copy incomplete")
        engine = self.engine
        remap: dict[int, int] = {}
        try:
            for cid, f in sorted(self._files.items()):
                f.sync()
                f.close()
                local = engine.next_chunk_id
                engine.next_chunk_id += 1
                name = chunk_name(local)
                engine.fs.rename(self._staging_name(cid), name)
                engine.fs.mark_immutable(name)
                engine.chunks[local] = FileChunk(engine.fs, name, engine.cache,
                                                 engine.tun.read_ahead_pages)
                engine.refs[local] = 0
                remap[cid] = local
        except (CorruptChunk, DiskFullError) as exc:
            self._files.clear()
            for local in remap.values():
                engine.chunks.pop(local).close()
                engine.refs.pop(local)
                engine.fs.delete(chunk_name(local))
            raise ValueError(f"received chunk rejected: {exc}") from exc
        self._files.clear()
        tr = engine.ensure_track(self.track_id)
        tr.last_executed = self.snap_paxos_id
        tr.durable_paxos_id = self.snap_paxos_id
        tr.next_local_shard_id = self._next_local_shard_id
        for descriptor, is_log, chunks in self._shards:
            state = ShardState(descriptor, is_log)
            state.covered = self.snap_paxos_id
            state.chunk_ids = [remap[cid] for cid, _ in chunks]
            for local in state.chunk_ids:
                engine._ref(local)
            if is_log:
                tr.log_shard = state
            else:
                tr.shards[descriptor.shard_id] = state
        engine.write_toc()
