"""Small per-node state files: acceptor promises and the run counter.

Both are written whole with a temp-and-rename so a reader only ever sees
a complete old or complete new file.  The acceptor file for a track
holds only the round currently being agreed on; it must never be lost
while that round is undecided, so a file that fails its checksum stops
the node instead of being ignored.
"""

from __future__ import annotations

from ..codec import CodecError
from ..messages import (AcceptorRecord, ConfigSnapshotRecord, RunIdRecord,
                        decode_frame)
from .fs import FileSystem

ACCEPTOR_PREFIX = "paxos."
RUN_ID_NAME = "runid"
CONFIG_SNAPSHOT_NAME = "config.snapshot"


class StateFileError(Exception):
    """A state file exists but cannot be trusted."""


def acceptor_name(track_id: int) -> str:
    return f"{ACCEPTOR_PREFIX}{track_id}"


def save_acceptor(fs: FileSystem, track_id: int, record: AcceptorRecord) -> None:
    fs.write_whole(acceptor_name(track_id), record.encode_frame())


def load_acceptor(fs: FileSystem, track_id: int) -> AcceptorRecord | None:
    name = acceptor_name(track_id)
    if not fs.exists(name):
        return None
    try:
        record = decode_frame(fs.read_whole(name))
    except CodecError as exc:
        raise StateFileError(f"{name}: {exc}") from exc
    if not isinstance(record, AcceptorRecord):
        raise StateFileError(f"{name}: unexpected record type")
    return record


def clear_acceptor(fs: FileSystem, track_id: int) -> None:
    fs.delete(acceptor_name(track_id))


def save_config_snapshot(fs: FileSystem, paxos_id: int, config: bytes) -> None:
    """Persist the applied cluster config so boot never needs the full
    round history; written on every applied config command."""
    record = ConfigSnapshotRecord(paxos_id=paxos_id, config=config)
    fs.write_whole(CONFIG_SNAPSHOT_NAME, record.encode_frame())


def load_config_snapshot(fs: FileSystem) -> tuple[int, bytes] | None:
    if not fs.exists(CONFIG_SNAPSHOT_NAME):
        return None
    try:
        record = decode_frame(fs.read_whole(CONFIG_SNAPSHOT_NAME))
    except CodecError as exc:
        raise StateFileError(f"{CONFIG_SNAPSHOT_NAME}: {exc}") from exc
    if not isinstance(record, ConfigSnapshotRecord):
        raise StateFileError(f"{CONFIG_SNAPSHOT_NAME}: unexpected record type")
    return record.paxos_id, record.config


def bump_run_id(fs: FileSystem) -> int:
    """Advance and persist the per-node run counter; called once per start.

    Proposal identifiers embed this, so identifiers from a previous life
    of the process can never be reused.
    """
    current = 0
    if fs.exists(RUN_ID_NAME):
        try:
            record = decode_frame(fs.read_whole(RUN_ID_NAME))
        except CodecError as exc:
            raise StateFileError(f"{RUN_ID_NAME}: {exc}") from exc
        if not isinstance(record, RunIdRecord):
            raise StateFileError(f"{RUN_ID_NAME}: unexpected record type")
        current = record.run_id
    fresh = current + 1
    fs.write_whole(RUN_ID_NAME, RunIdRecord(run_id=fresh).encode_frame())
    return fresh
