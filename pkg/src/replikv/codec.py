"""Binary framing shared by the wire protocol and the on-disk redo log.

A frame is a 4-byte big-endian payload length followed by the payload.
The payload is: message class (1 byte), message type (1 byte), the fields,
and a CRC32 of everything before it as the final 4 bytes.  Integers are
8-byte big-endian unsigned, byte strings are a 4-byte big-endian length
followed by the bytes.
"""

from __future__ import annotations

import struct
import zlib

u8_fmt = struct.Struct(">B")
u16_fmt = struct.Struct(">H")
u32_fmt = struct.Struct(">I")
u64_fmt = struct.Struct(">Q")

LEN_PREFIX_SIZE = 4
CRC_SIZE = 4
MAX_FRAME_SIZE = 64 * 1024 * 1024  # sanity bound, not a protocol limit


class CodecError(Exception):
    """Base for framing and field decode failures."""


class CorruptFrame(CodecError):
    """Frame failed CRC, declared an absurd length, or had trailing garbage."""


class TruncatedFrame(CodecError):
    """Field decode ran off the end of the payload."""


class Writer:
    """Accumulates encoded fields for one payload."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(u8_fmt.pack(value))
        return self

    def u16(self, value: int) -> "Writer":
        self._parts.append(u16_fmt.pack(value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(u32_fmt.pack(value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(u64_fmt.pack(value))
        return self

    def bytes_(self, value: bytes) -> "Writer":
        self._parts.append(u32_fmt.pack(len(value)))
        self._parts.append(value)
        return self

    def raw(self, value: bytes) -> "Writer":
        self._parts.append(value)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Cursor over one payload's fields; raises TruncatedFrame on overrun."""

    def __init__(self, data: bytes, offset: int = 0) -> None:
        self._data = data
        self._pos = offset

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise TruncatedFrame(f"need {n} bytes at offset {self._pos}, have {len(self._data)}")
        piece = self._data[self._pos:end]
        self._pos = end
        return piece

    def u8(self) -> int:
        return u8_fmt.unpack(self._take(1))[0]

    def u16(self) -> int:
        return u16_fmt.unpack(self._take(2))[0]

    def u32(self) -> int:
        return u32_fmt.unpack(self._take(4))[0]

    def u64(self) -> int:
        return u64_fmt.unpack(self._take(8))[0]

    def bytes_(self) -> bytes:
        n = self.u32()
        return self._take(n)

    def remaining(self) -> int:
        return len(self._data) - self._pos

    def at_end(self) -> bool:
        return self._pos == len(self._data)


def seal_frame(msg_class: int, msg_type: int, fields: bytes) -> bytes:
    """Build a complete frame: length prefix, class, type, fields, CRC."""
    payload = u8_fmt.pack(msg_class) + u8_fmt.pack(msg_type) + fields
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    payload += u32_fmt.pack(crc)
    return u32_fmt.pack(len(payload)) + payload


def open_frame(frame: bytes) -> tuple[int, int, Reader]:
    """Validate a complete frame and return (class, type, field reader)."""
    if len(frame) < LEN_PREFIX_SIZE:
        raise TruncatedFrame("frame shorter than length prefix")
    declared = u32_fmt.unpack(frame[:LEN_PREFIX_SIZE])[0]
    if declared > MAX_FRAME_SIZE:
        raise CorruptFrame(f"declared payload of {declared} bytes")
    if len(frame) != LEN_PREFIX_SIZE + declared:
        raise CorruptFrame("frame length does not match prefix")
    return _open_payload(frame[LEN_PREFIX_SIZE:])


def _open_payload(payload: bytes) -> tuple[int, int, Reader]:
    if len(payload) < 2 + CRC_SIZE:
        raise CorruptFrame("payload too short for header and CRC")
    body, crc_bytes = payload[:-CRC_SIZE], payload[-CRC_SIZE:]
    expected = u32_fmt.unpack(crc_bytes)[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != expected:
        raise CorruptFrame(f"CRC mismatch: stored {expected:#x}, computed {actual:#x}")
    return body[0], body[1], Reader(body, offset=2)


def scan_frame(buffer: bytes, offset: int = 0) -> tuple[int, int, Reader, int] | None:
    """Try to pull one frame out of a byte stream starting at offset.

    Returns (class, type, reader, bytes consumed) or None if the buffer
    holds an incomplete frame.  Raises CorruptFrame on a bad CRC or an
    absurd length prefix; the caller owns the decision to drop the stream.
    """
    avail = len(buffer) - offset
    if avail < LEN_PREFIX_SIZE:
        return None
    declared = u32_fmt.unpack(buffer[offset:offset + LEN_PREFIX_SIZE])[0]
    if declared > MAX_FRAME_SIZE:
        raise CorruptFrame(f"declared payload of {declared} bytes")
    total = LEN_PREFIX_SIZE + declared
    if avail < total:
        return None
    cls, typ, reader = _open_payload(buffer[offset + LEN_PREFIX_SIZE:offset + total])
    return cls, typ, reader, total
