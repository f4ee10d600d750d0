"""Table of contents: the one synchronously rewritten metadata file.

The TOC names every live chunk file per shard per track, the durable
round marker per track, and the id counters.  It is replaced atomically
(write toc.tmp, sync, rename) so a crash leaves either the old or the
new version, never a torn one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..codec import Reader, Writer
from ..messages import TocRecord, decode_frame
from ..types import ShardDescriptor
from .fs import FileSystem

TOC_NAME = "toc"
TOC_VERSION = 1


@dataclass
class ShardToc:
    descriptor: ShardDescriptor
    chunk_ids: list[int] = field(default_factory=list)
    is_log: bool = False
    # last round whose effects on this shard are fully inside chunk_ids;
    # redo replay must not re-apply older rounds to the shard (an Add
    # applied twice is not the same as an Add applied once)
    covered_paxos_id: int = 0


@dataclass
class TrackToc:
    track_id: int
    durable_paxos_id: int = 0
    next_local_shard_id: int = 1
    shards: list[ShardToc] = field(default_factory=list)


@dataclass
class Toc:
    next_chunk_id: int = 1
    tracks: list[TrackToc] = field(default_factory=list)

    def encode(self) -> bytes:
        w = Writer()
        w.u16(TOC_VERSION)
        w.u64(self.next_chunk_id)
        w.u32(len(self.tracks))
        for t in sorted(self.tracks, key=lambda t: t.track_id):
            w.u64(t.track_id)
            w.u64(t.durable_paxos_id)
            w.u64(t.next_local_shard_id)
            w.u32(len(t.shards))
            for s in sorted(t.shards, key=lambda s: s.descriptor.shard_id):
                s.descriptor.encode(w)
                w.u8(1 if s.is_log else 0)
                w.u64(s.covered_paxos_id)
                w.u32(len(s.chunk_ids))
                for cid in s.chunk_ids:
                    w.u64(cid)
        return TocRecord(body=w.getvalue()).encode_frame()

    @staticmethod
    def decode(frame: bytes) -> "Toc":
        rec = decode_frame(frame)
        assert isinstance(rec, TocRecord)
        r = Reader(rec.body)
        version = r.u16()
        if version != TOC_VERSION:
            raise ValueError(f"unsupported toc version {version}")
        toc = Toc(next_chunk_id=r.u64())
        for _ in range(r.u32()):
            t = TrackToc(track_id=r.u64(), durable_paxos_id=r.u64(),
                         next_local_shard_id=r.u64())
            for _ in range(r.u32()):
                s = ShardToc(descriptor=ShardDescriptor.decode(r))
                s.is_log = r.u8() != 0
                s.covered_paxos_id = r.u64()
                s.chunk_ids = [r.u64() for _ in range(r.u32())]
                t.shards.append(s)
            toc.tracks.append(t)
        return toc


def write_toc(fs: FileSystem, toc: Toc) -> None:
    # write_whole is atomic on both filesystems: a reader sees the old
    # complete table or the new one, never a mix
    fs.write_whole(TOC_NAME, toc.encode())


def read_toc(fs: FileSystem) -> Toc | None:
    if not fs.exists(TOC_NAME):
        return None
    return Toc.decode(fs.read_whole(TOC_NAME))
