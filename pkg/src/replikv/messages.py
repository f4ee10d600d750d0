"""Message registry for the wire protocol and on-disk records.

Each message declares its payload as FIELDS, a tuple of (name, kind)
pairs; encoding and decoding walk that schema.  Structured payloads
(command lists, shard lists, configs, manifests) travel as pre-encoded
byte fields so the schema stays flat.  Redo-log and state-file records
reuse the same framing, which is why class STORAGE lives here.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields
from typing import ClassVar

from .codec import CorruptFrame, Reader, Writer, open_frame, scan_frame, seal_frame
from .types import ProposalID


class MsgClass:
    CONN = 1
    PAXOS = 2
    LEASE = 3
    CLUSTER = 4
    CATCHUP = 5
    CLIENT = 6
    STORAGE = 7


_REGISTRY: dict[tuple[int, int], type["Message"]] = {}


def register(cls: type["Message"]) -> type["Message"]:
    key = (cls.CLASS, cls.TYPE)
    if key in _REGISTRY:
        raise RuntimeError(f"duplicate message id {key} for {cls.__name__}")
    _REGISTRY[key] = cls
    declared = tuple(f[0] for f in cls.FIELDS)
    actual = tuple(f.name for f in dc_fields(cls))
    if declared != actual:
        raise RuntimeError(f"{cls.__name__}: FIELDS {declared} != dataclass fields {actual}")
    return cls


@dataclass
class Message:
    CLASS: ClassVar[int] = 0
    TYPE: ClassVar[int] = 0
    FIELDS: ClassVar[tuple[tuple[str, str], ...]] = ()

    def encode_payload(self) -> bytes:
        w = Writer()
        for name, kind in self.FIELDS:
            v = getattr(self, name)
            if kind == "u8":
                w.u8(v)
            elif kind == "u16":
                w.u16(v)
            elif kind == "u32":
                w.u32(v)
            elif kind == "u64":
                w.u64(v)
            elif kind == "bytes":
                w.bytes_(v)
            elif kind == "str":
                w.bytes_(v.encode())
            elif kind == "pid":
                v.encode(w)
            elif kind == "opt_pid":
                if v is None:
                    w.u8(0)
                else:
                    w.u8(1)
                    v.encode(w)
            else:
                raise RuntimeError(f"unknown field kind {kind}")
        return w.getvalue()

    def encode_frame(self) -> bytes:
        return seal_frame(self.CLASS, self.TYPE, self.encode_payload())

    @classmethod
    def decode_fields(cls, r: Reader) -> "Message":
        kw: dict[str, object] = {}
        for name, kind in cls.FIELDS:
            if kind == "u8":
                kw[name] = r.u8()
            elif kind == "u16":
                kw[name] = r.u16()
            elif kind == "u32":
                kw[name] = r.u32()
            elif kind == "u64":
                kw[name] = r.u64()
            elif kind == "bytes":
                kw[name] = r.bytes_()
            elif kind == "str":
                kw[name] = r.bytes_().decode()
            elif kind == "pid":
                kw[name] = ProposalID.decode(r)
            elif kind == "opt_pid":
                kw[name] = ProposalID.decode(r) if r.u8() else None
        msg = cls(**kw)  # type: ignore[arg-type]
        if not r.at_end():
            raise CorruptFrame(f"{cls.__name__}: {r.remaining()} trailing bytes")
        return msg


def decode_frame(frame: bytes) -> Message:
    msg_class, msg_type, reader = open_frame(frame)
    cls = _REGISTRY.get((msg_class, msg_type))
    if cls is None:
        raise CorruptFrame(f"unknown message id ({msg_class}, {msg_type})")
    return cls.decode_fields(reader)


def scan_message(buffer: bytes, offset: int = 0) -> tuple[Message, int] | None:
    """Pull one message from a stream; None while incomplete."""
    got = scan_frame(buffer, offset)
    if got is None:
        return None
    msg_class, msg_type, reader, consumed = got
    cls = _REGISTRY.get((msg_class, msg_type))
    if cls is None:
        raise CorruptFrame(f"unknown message id ({msg_class}, {msg_type})")
    return cls.decode_fields(reader), consumed


# -- connection bookkeeping -------------------------------------------------

@register
@dataclass
class Hello(Message):
    CLASS = MsgClass.CONN
    TYPE = 1
    FIELDS = (("node_id", "u64"), ("kind", "u8"), ("endpoint", "str"))
    node_id: int
    kind: int  # 0 = cluster node, 1 = client
    endpoint: str


@register
@dataclass
class Ping(Message):
    CLASS = MsgClass.CONN
    TYPE = 2
    FIELDS = (("nonce", "u64"),)
    nonce: int


@register
@dataclass
class Pong(Message):
    CLASS = MsgClass.CONN
    TYPE = 3
    FIELDS = (("nonce", "u64"),)
    nonce: int


# -- single-round consensus -------------------------------------------------

@register
@dataclass
class PaxosPrepare(Message):
    CLASS = MsgClass.PAXOS
    TYPE = 1
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("proposal", "pid"))
    quorum_id: int
    paxos_id: int
    proposal: ProposalID


@register
@dataclass
class PaxosPrepareGrant(Message):
    CLASS = MsgClass.PAXOS
    TYPE = 2
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("proposal", "pid"),
              ("accepted", "opt_pid"), ("accepted_value", "bytes"))
    quorum_id: int
    paxos_id: int
    proposal: ProposalID
    accepted: ProposalID | None
    accepted_value: bytes


@register
@dataclass
class PaxosPrepareReject(Message):
    CLASS = MsgClass.PAXOS
    TYPE = 3
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("proposal", "pid"),
              ("promised", "pid"))
    quorum_id: int
    paxos_id: int
    proposal: ProposalID
    promised: ProposalID


@register
@dataclass
class PaxosPropose(Message):
    CLASS = MsgClass.PAXOS
    TYPE = 4
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("proposal", "pid"),
              ("value", "bytes"))
    quorum_id: int
    paxos_id: int
    proposal: ProposalID
    value: bytes


@register
@dataclass
class PaxosProposeAccept(Message):
    CLASS = MsgClass.PAXOS
    TYPE = 5
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("proposal", "pid"))
    quorum_id: int
    paxos_id: int
    proposal: ProposalID


@register
@dataclass
class PaxosProposeReject(Message):
    CLASS = MsgClass.PAXOS
    TYPE = 6
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("proposal", "pid"),
              ("promised", "pid"))
    quorum_id: int
    paxos_id: int
    proposal: ProposalID
    promised: ProposalID


@register
@dataclass
class PaxosLearnValue(Message):
    CLASS = MsgClass.PAXOS
    TYPE = 7
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("value", "bytes"))
    quorum_id: int
    paxos_id: int
    value: bytes


@register
@dataclass
class PaxosLearnProposal(Message):
    """Learn by proposal identity alone; valid when the receiver accepted it."""

    CLASS = MsgClass.PAXOS
    TYPE = 8
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("proposal", "pid"))
    quorum_id: int
    paxos_id: int
    proposal: ProposalID


@register
@dataclass
class PaxosRequestValue(Message):
    CLASS = MsgClass.PAXOS
    TYPE = 9
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"))
    quorum_id: int
    paxos_id: int


@register
@dataclass
class PaxosRoundDecided(Message):
    """Reply to any message about a round this node already executed."""

    CLASS = MsgClass.PAXOS
    TYPE = 10
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("value", "bytes"),
              ("current_paxos_id", "u64"))
    quorum_id: int
    paxos_id: int
    value: bytes
    current_paxos_id: int


# -- lease election ---------------------------------------------------------

@register
@dataclass
class LeasePrepare(Message):
    CLASS = MsgClass.LEASE
    TYPE = 1
    FIELDS = (("proposal", "pid"),)
    proposal: ProposalID


@register
@dataclass
class LeasePrepareGrant(Message):
    """Carries the unexpired accepted lease, if any, as (node, remaining)."""

    CLASS = MsgClass.LEASE
    TYPE = 2
    FIELDS = (("proposal", "pid"), ("accepted", "opt_pid"),
              ("lease_node_id", "u64"), ("lease_remaining_ms", "u64"))
    proposal: ProposalID
    accepted: ProposalID | None
    lease_node_id: int
    lease_remaining_ms: int


@register
@dataclass
class LeasePrepareReject(Message):
    CLASS = MsgClass.LEASE
    TYPE = 3
    FIELDS = (("proposal", "pid"), ("promised", "pid"))
    proposal: ProposalID
    promised: ProposalID


@register
@dataclass
class LeasePropose(Message):
    CLASS = MsgClass.LEASE
    TYPE = 4
    FIELDS = (("proposal", "pid"), ("lease_node_id", "u64"), ("duration_ms", "u64"))
    proposal: ProposalID
    lease_node_id: int
    duration_ms: int


@register
@dataclass
class LeaseProposeAccept(Message):
    CLASS = MsgClass.LEASE
    TYPE = 5
    FIELDS = (("proposal", "pid"),)
    proposal: ProposalID


@register
@dataclass
class LeaseProposeReject(Message):
    CLASS = MsgClass.LEASE
    TYPE = 6
    FIELDS = (("proposal", "pid"), ("promised", "pid"))
    proposal: ProposalID
    promised: ProposalID


# -- cluster control --------------------------------------------------------

@register
@dataclass
class Heartbeat(Message):
    """Node to controllers; send_time_ms is the sender's own clock."""

    CLASS = MsgClass.CLUSTER
    TYPE = 1
    FIELDS = (("node_id", "u64"), ("endpoint", "str"), ("send_time_ms", "u64"),
              ("tracks", "bytes"))
    node_id: int
    endpoint: str
    send_time_ms: int
    tracks: bytes  # encoded TrackReport list


@register
@dataclass
class HeartbeatAck(Message):
    """Master to node; echoes send time so lease expiry uses sender's clock."""

    CLASS = MsgClass.CLUSTER
    TYPE = 2
    FIELDS = (("master_node_id", "u64"), ("echo_send_time_ms", "u64"),
              ("config_version", "u64"), ("grants", "bytes"))
    master_node_id: int
    echo_send_time_ms: int
    config_version: int
    grants: bytes  # encoded list of (quorum_id, duration_ms)


@register
@dataclass
class MasterAnnounce(Message):
    CLASS = MsgClass.CLUSTER
    TYPE = 3
    FIELDS = (("node_id", "u64"), ("remaining_ms", "u64"))
    node_id: int
    remaining_ms: int


@register
@dataclass
class ConfigPush(Message):
    CLASS = MsgClass.CLUSTER
    TYPE = 4
    FIELDS = (("config", "bytes"),)
    config: bytes


@register
@dataclass
class ConfigSnapshotRequest(Message):
    CLASS = MsgClass.CLUSTER
    TYPE = 5
    FIELDS = ()


@register
@dataclass
class ConfigSnapshot(Message):
    CLASS = MsgClass.CLUSTER
    TYPE = 6
    FIELDS = (("paxos_id", "u64"), ("config", "bytes"))
    paxos_id: int
    config: bytes


@register
@dataclass
class ActivationRestart(Message):
    """Master tells a primary to rerun its round as full consensus with node_id in."""

    CLASS = MsgClass.CLUSTER
    TYPE = 7
    FIELDS = (("quorum_id", "u64"), ("node_id", "u64"))
    quorum_id: int
    node_id: int


@register
@dataclass
class ActivationDone(Message):
    CLASS = MsgClass.CLUSTER
    TYPE = 8
    FIELDS = (("quorum_id", "u64"), ("node_id", "u64"), ("paxos_id", "u64"))
    quorum_id: int
    node_id: int
    paxos_id: int


@register
@dataclass
class PrimaryGrant(Message):
    """Unsolicited lease push right after appointment; duration from receipt."""

    CLASS = MsgClass.CLUSTER
    TYPE = 9
    FIELDS = (("quorum_id", "u64"), ("duration_ms", "u64"))
    quorum_id: int
    duration_ms: int


# -- catchup ----------------------------------------------------------------

@register
@dataclass
class CatchupRequest(Message):
    CLASS = MsgClass.CATCHUP
    TYPE = 1
    FIELDS = (("quorum_id", "u64"), ("from_paxos_id", "u64"))
    quorum_id: int
    from_paxos_id: int


@register
@dataclass
class CatchupRound(Message):
    CLASS = MsgClass.CATCHUP
    TYPE = 2
    FIELDS = (("quorum_id", "u64"), ("paxos_id", "u64"), ("value", "bytes"),
              ("last", "u8"))
    quorum_id: int
    paxos_id: int
    value: bytes
    last: int


@register
@dataclass
class CatchupDbRequired(Message):
    """Requested rounds fell out of log retention; full state copy needed."""

    CLASS = MsgClass.CATCHUP
    TYPE = 3
    FIELDS = (("quorum_id", "u64"), ("oldest_available", "u64"))
    quorum_id: int
    oldest_available: int


@register
@dataclass
class CatchupDbBegin(Message):
    CLASS = MsgClass.CATCHUP
    TYPE = 4
    FIELDS = (("quorum_id", "u64"), ("snap_paxos_id", "u64"), ("manifest", "bytes"))
    quorum_id: int
    snap_paxos_id: int
    manifest: bytes


@register
@dataclass
class CatchupDbChunk(Message):
    CLASS = MsgClass.CATCHUP
    TYPE = 5
    FIELDS = (("quorum_id", "u64"), ("chunk_id", "u64"), ("offset", "u64"),
              ("data", "bytes"), ("last", "u8"))
    quorum_id: int
    chunk_id: int
    offset: int
    data: bytes
    last: int


@register
@dataclass
class CatchupDbEnd(Message):
    CLASS = MsgClass.CATCHUP
    TYPE = 6
    FIELDS = (("quorum_id", "u64"),)
    quorum_id: int


# -- client protocol --------------------------------------------------------

@register
@dataclass
class ClientGetConfig(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 1
    FIELDS = (("request_id", "u64"),)
    request_id: int


@register
@dataclass
class ClientConfig(Message):
    """Config for a client; pushed with request_id 0 on every change."""

    CLASS = MsgClass.CLIENT
    TYPE = 2
    FIELDS = (("request_id", "u64"), ("master_node_id", "u64"), ("config", "bytes"))
    request_id: int
    master_node_id: int
    config: bytes


@register
@dataclass
class ClientWrite(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 3
    FIELDS = (("request_id", "u64"), ("client_id", "u64"), ("quorum_id", "u64"),
              ("commands", "bytes"))
    request_id: int
    client_id: int
    quorum_id: int
    commands: bytes


@register
@dataclass
class ClientWriteResult(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 4
    FIELDS = (("request_id", "u64"), ("status", "u8"), ("outcomes", "bytes"),
              ("primary_hint", "u64"), ("config_version", "u64"))
    request_id: int
    status: int
    outcomes: bytes  # encoded list of (status, value)
    primary_hint: int
    config_version: int


@register
@dataclass
class ClientGet(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 5
    FIELDS = (("request_id", "u64"), ("table_id", "u64"), ("key", "bytes"))
    request_id: int
    table_id: int
    key: bytes


@register
@dataclass
class ClientGetResult(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 6
    FIELDS = (("request_id", "u64"), ("status", "u8"), ("value", "bytes"),
              ("primary_hint", "u64"), ("config_version", "u64"))
    request_id: int
    status: int
    value: bytes
    primary_hint: int
    config_version: int


@register
@dataclass
class ClientList(Message):
    """Range read; start inclusive, end exclusive, count 0 means unbounded."""

    CLASS = MsgClass.CLIENT
    TYPE = 7
    FIELDS = (("request_id", "u64"), ("table_id", "u64"), ("start", "bytes"),
              ("end", "bytes"), ("prefix", "bytes"), ("count", "u64"),
              ("direction", "u8"), ("count_only", "u8"))
    request_id: int
    table_id: int
    start: bytes
    end: bytes
    prefix: bytes
    count: int
    direction: int  # 0 forward, 1 backward
    count_only: int


@register
@dataclass
class ClientListResult(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 8
    FIELDS = (("request_id", "u64"), ("status", "u8"), ("items", "bytes"),
              ("total", "u64"), ("primary_hint", "u64"), ("config_version", "u64"))
    request_id: int
    status: int
    items: bytes  # encoded list of (key, value)
    total: int
    primary_hint: int
    config_version: int


@register
@dataclass
class ClientTxBegin(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 9
    FIELDS = (("request_id", "u64"), ("client_id", "u64"), ("quorum_id", "u64"))
    request_id: int
    client_id: int
    quorum_id: int


@register
@dataclass
class ClientTxBeginResult(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 10
    FIELDS = (("request_id", "u64"), ("status", "u8"), ("txid", "u64"),
              ("primary_hint", "u64"), ("config_version", "u64"))
    request_id: int
    status: int
    txid: int
    primary_hint: int
    config_version: int


@register
@dataclass
class ClientLock(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 11
    FIELDS = (("request_id", "u64"), ("client_id", "u64"), ("txid", "u64"),
              ("table_id", "u64"), ("key", "bytes"))
    request_id: int
    client_id: int
    txid: int
    table_id: int
    key: bytes


@register
@dataclass
class ClientLockResult(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 12
    FIELDS = (("request_id", "u64"), ("status", "u8"),
              ("primary_hint", "u64"), ("config_version", "u64"))
    request_id: int
    status: int
    primary_hint: int
    config_version: int


@register
@dataclass
class ClientTxCommit(Message):
    """Commit is atomic: all commands land in one replication round."""

    CLASS = MsgClass.CLIENT
    TYPE = 13
    FIELDS = (("request_id", "u64"), ("client_id", "u64"), ("txid", "u64"),
              ("quorum_id", "u64"), ("commands", "bytes"))
    request_id: int
    client_id: int
    txid: int
    quorum_id: int
    commands: bytes


@register
@dataclass
class ClientTxRollback(Message):
    CLASS = MsgClass.CLIENT
    TYPE = 14
    FIELDS = (("request_id", "u64"), ("client_id", "u64"), ("txid", "u64"),
              ("quorum_id", "u64"))
    request_id: int
    client_id: int
    txid: int
    quorum_id: int


# -- on-disk records --------------------------------------------------------

@register
@dataclass
class RedoSegmentHeader(Message):
    CLASS = MsgClass.STORAGE
    TYPE = 1
    FIELDS = (("segment_id", "u64"),)
    segment_id: int


@register
@dataclass
class RedoRound(Message):
    """One executed round; the redo log is a sequence of these."""

    CLASS = MsgClass.STORAGE
    TYPE = 2
    FIELDS = (("track_id", "u64"), ("paxos_id", "u64"), ("value", "bytes"))
    track_id: int
    paxos_id: int
    value: bytes


@register
@dataclass
class TocRecord(Message):
    CLASS = MsgClass.STORAGE
    TYPE = 3
    FIELDS = (("body", "bytes"),)
    body: bytes


@register
@dataclass
class AcceptorRecord(Message):
    """Durable acceptor state for one track's current round."""

    CLASS = MsgClass.STORAGE
    TYPE = 4
    FIELDS = (("paxos_id", "u64"), ("promised", "opt_pid"), ("accepted", "opt_pid"),
              ("value", "bytes"))
    paxos_id: int
    promised: ProposalID | None
    accepted: ProposalID | None
    value: bytes


@register
@dataclass
class RunIdRecord(Message):
    CLASS = MsgClass.STORAGE
    TYPE = 5
    FIELDS = (("run_id", "u64"),)
    run_id: int


@register
@dataclass
class ConfigSnapshotRecord(Message):
    CLASS = MsgClass.STORAGE
    TYPE = 6
    FIELDS = (("paxos_id", "u64"), ("config", "bytes"))
    paxos_id: int
    config: bytes


# -- small list payload helpers --------------------------------------------

def encode_pairs(pairs: list[tuple[bytes, bytes]]) -> bytes:
    w = Writer()
    w.u32(len(pairs))
    for k, v in pairs:
        w.bytes_(k)
        w.bytes_(v)
    return w.getvalue()


def decode_pairs(data: bytes) -> list[tuple[bytes, bytes]]:
    r = Reader(data)
    return [(r.bytes_(), r.bytes_()) for _ in range(r.u32())]


def encode_outcomes(outcomes: list[tuple[int, bytes]]) -> bytes:
    w = Writer()
    w.u32(len(outcomes))
    for status, value in outcomes:
        w.u8(status)
        w.bytes_(value)
    return w.getvalue()


def decode_outcomes(data: bytes) -> list[tuple[int, bytes]]:
    r = Reader(data)
    return [(r.u8(), r.bytes_()) for _ in range(r.u32())]


def encode_grants(grants: list[tuple[int, int]]) -> bytes:
    w = Writer()
    w.u32(len(grants))
    for quorum_id, duration_ms in grants:
        w.u64(quorum_id)
        w.u64(duration_ms)
    return w.getvalue()


def decode_grants(data: bytes) -> list[tuple[int, int]]:
    r = Reader(data)
    return [(r.u64(), r.u64()) for _ in range(r.u32())]
