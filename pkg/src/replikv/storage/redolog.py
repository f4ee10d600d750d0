"""Append-only redo log, segmented.

Each segment file starts with a RedoSegmentHeader frame followed by
RedoRound frames; every frame carries its own CRC32.  Replay walks the
segments in id order and halts at the first record that fails its CRC
or is cut short, which is how a torn tail after a crash is detected.
Appends after recovery always open a fresh segment so a torn file is
never extended.
"""

from __future__ import annotations

import logging

from ..codec import CorruptFrame, TruncatedFrame
from ..messages import RedoRound, RedoSegmentHeader, scan_message
from .fs import FileSystem, WritableFile

log = logging.getLogger(__name__)

SEGMENT_PREFIX = "log."


def segment_name(segment_id: int) -> str:
    return f"{SEGMENT_PREFIX}{segment_id}"


def list_segment_ids(fs: FileSystem) -> list[int]:
    ids = []
    for name in fs.list_names():
        if name.startswith(SEGMENT_PREFIX):
            suffix = name[len(SEGMENT_PREFIX):]
            if suffix.isdigit():
                ids.append(int(suffix))
    return sorted(ids)


class RedoLog:
    """Writer side; replay is the module-level function below."""

    def __init__(self, fs: FileSystem, segment_size: int, first_segment_id: int) -> None:
        self._fs = fs
        self._segment_size = segment_size
        self.current_segment_id = first_segment_id
        self._file: WritableFile | None = None
        self._current_size = 0
        self._synced_through = 0  # bytes of current segment known durable
        self._sizes: dict[int, int] = {}
        for sid in list_segment_ids(fs):
            self._sizes[sid] = fs.file_size(segment_name(sid))

    def _open_segment(self) -> None:
        name = segment_name(self.current_segment_id)
        self._file = self._fs.open_append(name)
        header = RedoSegmentHeader(segment_id=self.current_segment_id).encode_frame()
        self._file.write(header)
        self._current_size = len(header)
        self._synced_through = 0
        self._sizes[self.current_segment_id] = self._current_size

    def append(self, track_id: int, paxos_id: int, value: bytes) -> int:
        """Returns the segment id the record landed in; not yet durable."""
        if self._file is None:
            self._open_segment()
        elif self._current_size >= self._segment_size:
            self.sync()
            self._file.close()
            self.current_segment_id += 1
            self._open_segment()
        frame = RedoRound(track_id=track_id, paxos_id=paxos_id, value=value).encode_frame()
        self._file.write(frame)
        self._current_size += len(frame)
        self._sizes[self.current_segment_id] = self._current_size
        return self.current_segment_id

    def sync(self) -> None:
        if self._file is not None and self._synced_through < self._current_size:
            self._file.sync()
            self._synced_through = self._current_size

    def has_unsynced(self) -> bool:
        return self._file is not None and self._synced_through < self._current_size

    def total_size(self) -> int:
        return sum(self._sizes.values())

    def segment_ids(self) -> list[int]:
        return sorted(self._sizes)

    def delete_below(self, keep_from: int) -> None:
        """Drop whole segments with id < keep_from; never the active one."""
        for sid in sorted(self._sizes):
            if sid >= keep_from or sid == self.current_segment_id:
                break
            self._fs.delete(segment_name(sid))
            del self._sizes[sid]

    def close(self) -> None:
        if self._file is not None:
            self.sync()
            self._file.close()
            self._file = None


def replay(fs: FileSystem):
    """Yield (segment_id, RedoRound) until the log ends or breaks.

    Stops at the first corrupt or truncated record; everything after it,
    including later intact segments, is abandoned.
    """
    for sid in list_segment_ids(fs):
        data = fs.read_whole(segment_name(sid))
        offset = 0
        first = True
        while offset < len(data):
            try:
                got = scan_message(data, offset)
            except (CorruptFrame, TruncatedFrame) as exc:
                log.warning("redo replay halted in segment %d at offset %d: %s",
                            sid, offset, exc)
                return
            if got is None:
                if offset < len(data):
                    log.warning("redo replay halted: torn tail in segment %d at offset %d",
                                sid, offset)
                return
            msg, consumed = got
            offset += consumed
            if first:
                first = False
                if not isinstance(msg, RedoSegmentHeader) or msg.segment_id != sid:
                    log.warning("redo replay halted: bad segment header in %d", sid)
                    return
                continue
            if not isinstance(msg, RedoRound):
                log.warning("redo replay halted: unexpected record in segment %d", sid)
                return
            yield sid, msg
