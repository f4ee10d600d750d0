"""Framing round-trip and corruption detection.

The round-trip oracle is structural equality plus re-encode byte
equality over randomly generated instances of every registered message.
Corruption detection flips single bits and expects a decode failure,
never a silently wrong message.
"""

from __future__ import annotations

import random

import pytest

from replikv import messages as m
from replikv.codec import CodecError, CorruptFrame, Reader, TruncatedFrame, Writer
from replikv.types import (Command, Opcode, ProposalID, ZERO_PROPOSAL,
                           decode_commands, encode_commands)

ALL_TYPES = sorted(m._REGISTRY.values(), key=lambda c: (c.CLASS, c.TYPE))


def random_value(rng: random.Random, kind: str):
    if kind == "u8":
        return rng.randrange(256)
    if kind == "u16":
        return rng.randrange(1 << 16)
    if kind == "u32":
        return rng.randrange(1 << 32)
    if kind == "u64":
        return rng.randrange(1 << 64)
    if kind == "bytes":
        return rng.randbytes(rng.randrange(0, 64))
    if kind == "str":
        return "".join(rng.choice("abcdefgh:/0129") for _ in range(rng.randrange(0, 16)))
    if kind == "pid":
        return ProposalID(rng.randrange(1 << 32), rng.randrange(1 << 16), rng.randrange(1 << 16))
    if kind == "opt_pid":
        if rng.random() < 0.3:
            return None
        return ProposalID(rng.randrange(1 << 32), rng.randrange(1 << 16), rng.randrange(1 << 16))
    raise AssertionError(kind)


def random_message(rng: random.Random) -> m.Message:
    cls = rng.choice(ALL_TYPES)
    kw = {name: random_value(rng, kind) for name, kind in cls.FIELDS}
    return cls(**kw)


def test_roundtrip_random_messages():
    rng = random.Random(0xC0DEC)
    for _ in range(10_000):
        msg = random_message(rng)
        frame = msg.encode_frame()
        back = m.decode_frame(frame)
        assert back == msg
        assert back.encode_frame() == frame


def test_bit_flip_corruption_detected():
    rng = random.Random(0xBADBAD)
    for _ in range(2_000):
        msg = random_message(rng)
        frame = bytearray(msg.encode_frame())
        pos = rng.randrange(len(frame))
        frame[pos] ^= 1 << rng.randrange(8)
        with pytest.raises(CodecError):
            m.decode_frame(bytes(frame))


def test_stream_scan_reassembles_fragments():
    rng = random.Random(7)
    msgs = [random_message(rng) for _ in range(200)]
    stream = b"".join(msg.encode_frame() for msg in msgs)
    # feed the stream in random-sized slices through a buffer
    buf = b""
    fed = 0
    got: list[m.Message] = []
    while fed < len(stream) or buf:
        step = rng.randrange(1, 40)
        buf += stream[fed:fed + step]
        fed += step
        while True:
            out = m.scan_message(buf)
            if out is None:
                break
            msg, consumed = out
            got.append(msg)
            buf = buf[consumed:]
        if fed >= len(stream) and m.scan_message(buf) is None and not buf:
            break
    assert got == msgs


def test_scan_incomplete_returns_none():
    msg = m.Ping(nonce=5)
    frame = msg.encode_frame()
    for cut in range(len(frame)):
        assert m.scan_message(frame[:cut]) is None


def test_unknown_message_id_rejected():
    from replikv.codec import seal_frame
    frame = seal_frame(250, 250, b"")
    with pytest.raises(CorruptFrame):
        m.decode_frame(frame)


def test_reader_overrun_raises():
    r = Reader(b"\x00\x01")
    with pytest.raises(TruncatedFrame):
        r.u64()


def test_writer_reader_primitives():
    w = Writer()
    w.u8(7).u16(300).u32(1 << 20).u64(1 << 40).bytes_(b"hi")
    r = Reader(w.getvalue())
    assert (r.u8(), r.u16(), r.u32(), r.u64(), r.bytes_()) == (7, 300, 1 << 20, 1 << 40, b"hi")
    assert r.at_end()


def test_proposal_id_ordering_counter_major():
    assert ProposalID(1, 9, 9) < ProposalID(2, 0, 0)
    assert ProposalID(2, 1, 5) < ProposalID(2, 2, 0)
    assert ProposalID(2, 2, 1) < ProposalID(2, 2, 3)
    assert ZERO_PROPOSAL < ProposalID(1, 0, 0)
    assert ZERO_PROPOSAL.is_zero()


def random_command(rng: random.Random) -> Command:
    op = rng.choice(list(Opcode))
    return Command(
        op,
        table_id=rng.randrange(1 << 32),
        key=rng.randbytes(rng.randrange(1, 24)),
        value=rng.randbytes(rng.randrange(0, 48)),
        num=rng.randrange(1 << 48),
        num2=rng.randrange(1 << 48),
        client_id=rng.randrange(1 << 32),
        request_id=rng.randrange(1 << 32),
    )


def test_command_list_roundtrip():
    rng = random.Random(42)
    from replikv.types import COMMAND_FIELDS
    for _ in range(2_000):
        cmds = [random_command(rng) for _ in range(rng.randrange(1, 6))]
        # zero out fields the wire does not carry so equality is exact
        normalized = []
        for c in cmds:
            present = COMMAND_FIELDS[c.opcode]
            normalized.append(Command(
                c.opcode,
                table_id=c.table_id if "table_id" in present else 0,
                key=c.key if "key" in present else b"",
                value=c.value if "value" in present else b"",
                num=c.num if "num" in present else 0,
                num2=c.num2 if "num2" in present else 0,
                client_id=c.client_id if "client" in present else 0,
                request_id=c.request_id if "client" in present else 0,
            ))
        data = encode_commands(normalized)
        assert decode_commands(data) == normalized


def test_empty_command_list_rejected():
    with pytest.raises(ValueError):
        encode_commands([])
    from replikv.codec import u32_fmt
    with pytest.raises(ValueError):
        decode_commands(u32_fmt.pack(0))
