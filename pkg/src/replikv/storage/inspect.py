"""Offline inspection of a node's data directory.

Everything here opens files read-only; it is safe to point at a live
directory, though the picture may be mid-update.
"""

from __future__ import annotations

import argparse
import sys

from .chunk import FileChunk, TAG_DELETE, CorruptChunk
from .engine import CHUNK_PREFIX, chunk_name
from .fs import FileSystem, OsFileSystem
from .redolog import replay
from .toc import read_toc


def chunk_entries(fs: FileSystem, name: str):
    """Every (key, tag, value) in one chunk file, in key order."""
    chunk = FileChunk(fs, name)
    try:
        yield from chunk.iter_range()
    finally:
        chunk.close()


def chunk_info(fs: FileSystem, name: str) -> dict:
    chunk = FileChunk(fs, name)
    try:
        return {
            "name": name,
            "file_size": chunk.file_size,
            "num_keys": chunk.num_keys,
            "pages": chunk.page_count,
            "smallest_key": chunk.smallest_key,
            "largest_key": chunk.largest_key,
            "middle_key": chunk.middle_key,
        }
    finally:
        chunk.close()


def verify_directory(fs: FileSystem) -> list[str]:
    """Full consistency pass; returns a list of problems (empty = clean)."""
    problems: list[str] = []
    toc = read_toc(fs)
    if toc is None:
        if fs.list_names():
            problems.append("no toc in a non-empty directory")
        return problems
    referenced: set[int] = set()
    for track in toc.tracks:
        for shard in track.shards:
            referenced.update(shard.chunk_ids)
    for cid in sorted(referenced):
        name = chunk_name(cid)
        if not fs.exists(name):
            problems.append(f"{name}: referenced by toc but missing")
            continue
        try:
            chunk = FileChunk(fs, name)
        except CorruptChunk as exc:
            problems.append(str(exc))
            continue
        try:
            count = sum(1 for _ in chunk.iter_range())
            if count != chunk.num_keys:
                problems.append(f"{name}: header says {chunk.num_keys} keys, "
                                f"pages hold {count}")
        except CorruptChunk as exc:
            problems.append(str(exc))
        finally:
            chunk.close()
    for name in fs.list_names():
        if name.startswith(CHUNK_PREFIX):
            suffix = name[len(CHUNK_PREFIX):]
            if suffix.isdigit() and int(suffix) not in referenced:
                problems.append(f"{name}: orphan (not referenced by toc)")
    return problems


def _fmt(b: bytes) -> str:
    try:
        text = b.decode("ascii")
        if text.isprintable():
            return text
    except UnicodeDecodeError:
        pass
    return "0x" + b.hex()


def _cmd_dump_chunk(fs: FileSystem, name: str) -> int:
    info = chunk_info(fs, name)
    print(f"{name}: {info['num_keys']} keys in {info['pages']} pages, "
          f"{info['file_size']} bytes")
    print(f"  range [{_fmt(info['smallest_key'])} .. {_fmt(info['largest_key'])}], "
          f"middle {_fmt(info['middle_key'])}")
    for key, tag, value in chunk_entries(fs, name):
        if tag == TAG_DELETE:
            print(f"  {_fmt(key)} = <deleted>")
        else:
            print(f"  {_fmt(key)} = {_fmt(value)}")
    return 0


def _cmd_dump_log(fs: FileSystem) -> int:
    for segment_id, rec in replay(fs):
        print(f"log.{segment_id}: track {rec.track_id} round {rec.paxos_id} "
              f"({len(rec.value)} bytes)")
    return 0


def _cmd_toc(fs: FileSystem) -> int:
    toc = read_toc(fs)
    if toc is None:
        print("no toc")
        return 1
    print(f"next chunk id {toc.next_chunk_id}")
    for track in toc.tracks:
        print(f"track {track.track_id}: durable through round "
              f"{track.durable_paxos_id}, next local shard {track.next_local_shard_id}")
        for shard in track.shards:
            d = shard.descriptor
            kind = "log" if shard.is_log else f"table {d.table_id}"
            lo = _fmt(d.first_key) if d.first_key else "-inf"
            hi = _fmt(d.last_key) if d.last_key else "+inf"
            print(f"  shard {d.shard_id} ({kind}) [{lo} .. {hi}) "
                  f"chunks {shard.chunk_ids}")
    return 0


def _cmd_verify(fs: FileSystem) -> int:
    problems = verify_directory(fs)
    for p in problems:
        print(p)
    print("clean" if not problems else f"{len(problems)} problem(s)")
    return 0 if not problems else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="replikv-inspect",
                                     description="inspect a node data directory")
    parser.add_argument("dir", help="node data directory")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("dump-chunk", help="print every entry of one chunk file")
    p.add_argument("name", help="chunk file name, e.g. chunk.7")
    sub.add_parser("dump-log", help="print the redo log records")
    sub.add_parser("toc", help="print the table of contents")
    sub.add_parser("verify", help="check every checksum and reference")
    args = parser.parse_args(argv)
    fs = OsFileSystem(args.dir)
    if args.cmd == "dump-chunk":
        return _cmd_dump_chunk(fs, args.name)
    if args.cmd == "dump-log":
        return _cmd_dump_log(fs)
    if args.cmd == "toc":
        return _cmd_toc(fs)
    return _cmd_verify(fs)


if __name__ == "__main__":
    sys.exit(main())
