"""Domain types: proposal identifiers, commands, and the cluster config.

Everything here has a canonical binary form built on codec.Writer so that
replicas can compare state byte-for-byte.  Key ranges treat an empty
first_key as minus infinity and an empty last_key as plus infinity;
last_key is exclusive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

from .codec import Reader, Writer


@dataclass(frozen=True, order=True)
class ProposalID:
    """Totally ordered proposal identity; counter is the major component."""

    counter: int
    run_id: int
    node_id: int

    def encode(self, w: Writer) -> None:
        w.u64(self.counter).u64(self.run_id).u64(self.node_id)

    @staticmethod
    def decode(r: Reader) -> "ProposalID":
        return ProposalID(r.u64(), r.u64(), r.u64())

    def is_zero(self) -> bool:
        return self.counter == 0 and self.run_id == 0 and self.node_id == 0


# Reserved for the leader fast path: acceptors treat it as an implicit,
# already-promised proposal when they have promised nothing else.
ZERO_PROPOSAL = ProposalID(0, 0, 0)


class Opcode(IntEnum):
    SET = 1
    DELETE = 2
    ADD = 3
    TRUNCATE = 4
    LOCK = 5
    UNLOCK = 6
    TX_COMMIT = 7
    SPLIT_SHARD = 8
    NOOP = 9
    ADOPT_TABLE = 10
    DROP_TABLE = 11
    CONFIG_REGISTER_SERVER = 32
    CONFIG_CREATE_DATABASE = 33
    CONFIG_RENAME_DATABASE = 34
    CONFIG_DELETE_DATABASE = 35
    CONFIG_CREATE_TABLE = 36
    CONFIG_RENAME_TABLE = 37
    CONFIG_DELETE_TABLE = 38
    CONFIG_CREATE_QUORUM = 39
    CONFIG_DELETE_QUORUM = 40
    CONFIG_ADD_NODE = 41
    CONFIG_REMOVE_NODE = 42
    CONFIG_ACTIVATE = 43
    CONFIG_DEACTIVATE = 44
    CONFIG_SET_PRIMARY = 45
    CONFIG_UPDATE_SHARDS = 46


class Status(IntEnum):
    OK = 0
    NOT_FOUND = 1
    NOT_PRIMARY = 2
    VALUE_NOT_NUMERIC = 3
    LOCK_HELD = 4
    TRANSACTION_EXPIRED = 5
    NO_SERVICE = 6
    BAD_REQUEST = 7
    UNKNOWN_TABLE = 8
    LOCKED = 9
    CONFLICT = 10


# Which Command fields each opcode carries on the wire, in encode order.
_T, _K, _V, _N, _N2, _C = "table_id", "key", "value", "num", "num2", "client"
COMMAND_FIELDS: dict[Opcode, tuple[str, ...]] = {
    Opcode.SET: (_T, _K, _V, _C),
    Opcode.DELETE: (_T, _K, _C),
    Opcode.ADD: (_T, _K, _N, _C),
    Opcode.TRUNCATE: (_T, _N, _C),
    Opcode.LOCK: (_T, _K, _N, _C),
    Opcode.UNLOCK: (_T, _K, _N, _C),
    Opcode.TX_COMMIT: (_N, _C),
    Opcode.SPLIT_SHARD: (_N, _N2, _K),
    Opcode.NOOP: (),
    Opcode.ADOPT_TABLE: (_N, _N2),
    Opcode.DROP_TABLE: (_N,),
    Opcode.CONFIG_REGISTER_SERVER: (_N, _V),
    Opcode.CONFIG_CREATE_DATABASE: (_V,),
    Opcode.CONFIG_RENAME_DATABASE: (_N, _V),
    Opcode.CONFIG_DELETE_DATABASE: (_N,),
    Opcode.CONFIG_CREATE_TABLE: (_N, _N2, _V),
    Opcode.CONFIG_RENAME_TABLE: (_N, _V),
    Opcode.CONFIG_DELETE_TABLE: (_N,),
    Opcode.CONFIG_CREATE_QUORUM: (_V,),
    Opcode.CONFIG_DELETE_QUORUM: (_N,),
    Opcode.CONFIG_ADD_NODE: (_N, _N2),
    Opcode.CONFIG_REMOVE_NODE: (_N, _N2),
    Opcode.CONFIG_ACTIVATE: (_N, _N2),
    Opcode.CONFIG_DEACTIVATE: (_N, _N2),
    Opcode.CONFIG_SET_PRIMARY: (_N, _N2),
    Opcode.CONFIG_UPDATE_SHARDS: (_N, _V),
}

WRITE_OPCODES = frozenset({Opcode.SET, Opcode.DELETE, Opcode.ADD, Opcode.TRUNCATE, Opcode.TX_COMMIT})


@dataclass(frozen=True)
class Command:
    """One operation; the opcode decides which fields are meaningful.

    num and num2 are overloaded per opcode (ADD delta, shard ids,
    transaction ids, config object ids).  client_id/request_id identify
    the originating client request for write deduplication; zero means
    an internal origin.
    """

    opcode: Opcode
    table_id: int = 0
    key: bytes = b""
    value: bytes = b""
    num: int = 0
    num2: int = 0
    client_id: int = 0
    request_id: int = 0

    def encode(self, w: Writer) -> None:
        w.u8(self.opcode)
        for f in COMMAND_FIELDS[self.opcode]:
            if f == _T:
                w.u64(self.table_id)
            elif f == _K:
                w.bytes_(self.key)
            elif f == _V:
                w.bytes_(self.value)
            elif f == _N:
                w.u64(self.num)
            elif f == _N2:
                w.u64(self.num2)
            elif f == _C:
                w.u64(self.client_id).u64(self.request_id)

    @staticmethod
    def decode(r: Reader) -> "Command":
        op = Opcode(r.u8())
        kw: dict[str, object] = {}
        for f in COMMAND_FIELDS[op]:
            if f == _T:
                kw["table_id"] = r.u64()
            elif f == _K:
                kw["key"] = r.bytes_()
            elif f == _V:
                kw["value"] = r.bytes_()
            elif f == _N:
                kw["num"] = r.u64()
            elif f == _N2:
                kw["num2"] = r.u64()
            elif f == _C:
                kw["client_id"] = r.u64()
                kw["request_id"] = r.u64()
        return Command(op, **kw)  # type: ignore[arg-type]


def encode_commands(commands: list[Command]) -> bytes:
    """A round value: a non-empty ordered command list."""
    if not commands:
        raise ValueError("round value must contain at least one command")
    w = Writer()
    w.u32(len(commands))
    for c in commands:
        c.encode(w)
    return w.getvalue()


def decode_commands(data: bytes) -> list[Command]:
    r = Reader(data)
    n = r.u32()
    if n == 0:
        raise ValueError("round value must contain at least one command")
    out = [Command.decode(r) for _ in range(n)]
    if not r.at_end():
        raise ValueError("trailing bytes after command list")
    return out


@dataclass(frozen=True)
class ShardDescriptor:
    """Key range [first_key, last_key) of one table's shard."""

    shard_id: int
    table_id: int
    first_key: bytes = b""
    last_key: bytes = b""
    is_split_result: bool = False

    def contains(self, key: bytes) -> bool:
        if self.first_key and key < self.first_key:
            return False
        if self.last_key and key >= self.last_key:
            return False
        return True

    def encode(self, w: Writer) -> None:
        w.u64(self.shard_id).u64(self.table_id)
        w.bytes_(self.first_key).bytes_(self.last_key)
        w.u8(1 if self.is_split_result else 0)

    @staticmethod
    def decode(r: Reader) -> "ShardDescriptor":
        return ShardDescriptor(r.u64(), r.u64(), r.bytes_(), r.bytes_(), r.u8() != 0)


def encode_shard_list(shards: list[ShardDescriptor]) -> bytes:
    w = Writer()
    w.u32(len(shards))
    for s in shards:
        s.encode(w)
    return w.getvalue()


def decode_shard_list(data: bytes) -> list[ShardDescriptor]:
    r = Reader(data)
    return [ShardDescriptor.decode(r) for _ in range(r.u32())]


def encode_node_ids(node_ids: list[int]) -> bytes:
    w = Writer()
    w.u32(len(node_ids))
    for n in node_ids:
        w.u64(n)
    return w.getvalue()


def decode_node_ids(data: bytes) -> list[int]:
    r = Reader(data)
    return [r.u64() for _ in range(r.u32())]


@dataclass(frozen=True)
class TrackReport:
    """One quorum's replication progress as reported in heartbeats."""

    quorum_id: int
    paxos_id: int  # last executed round
    shards: tuple[ShardDescriptor, ...] = ()


def encode_track_reports(reports: list[TrackReport]) -> bytes:
    w = Writer()
    w.u32(len(reports))
    for rep in reports:
        w.u64(rep.quorum_id).u64(rep.paxos_id)
        w.u32(len(rep.shards))
        for s in rep.shards:
            s.encode(w)
    return w.getvalue()


def decode_track_reports(data: bytes) -> list[TrackReport]:
    r = Reader(data)
    out = []
    for _ in range(r.u32()):
        quorum_id, paxos_id = r.u64(), r.u64()
        shards = tuple(ShardDescriptor.decode(r) for _ in range(r.u32()))
        out.append(TrackReport(quorum_id, paxos_id, shards))
    return out


@dataclass
class TableMeta:
    table_id: int
    database_id: int
    quorum_id: int
    name: str


@dataclass
class DatabaseMeta:
    database_id: int
    name: str


@dataclass
class QuorumMeta:
    quorum_id: int
    active_node_ids: list[int] = field(default_factory=list)
    inactive_node_ids: list[int] = field(default_factory=list)
    primary_node_id: int = 0  # 0 = unappointed

    def member_ids(self) -> list[int]:
        return sorted(self.active_node_ids + self.inactive_node_ids)


@dataclass
class ServerMeta:
    node_id: int
    endpoint: str


@dataclass
class ClusterConfig:
    """Replicated cluster metadata; config_version is the round that built it.

    Lease expiry times and heartbeat ages are deliberately absent: they
    are master-volatile and are merged into status reports, never
    replicated.
    """

    config_version: int = 0
    next_database_id: int = 1
    next_table_id: int = 1
    next_shard_id: int = 1
    next_quorum_id: int = 1
    databases: dict[int, DatabaseMeta] = field(default_factory=dict)
    tables: dict[int, TableMeta] = field(default_factory=dict)
    quorums: dict[int, QuorumMeta] = field(default_factory=dict)
    shards: dict[int, ShardDescriptor] = field(default_factory=dict)
    servers: dict[int, ServerMeta] = field(default_factory=dict)

    # -- queries ---------------------------------------------------------

    def database_by_name(self, name: str) -> DatabaseMeta | None:
        for db in self.databases.values():
            if db.name == name:
                return db
        return None

    def table_by_name(self, database_id: int, name: str) -> TableMeta | None:
        for t in self.tables.values():
            if t.database_id == database_id and t.name == name:
                return t
        return None

    def tables_of_database(self, database_id: int) -> list[TableMeta]:
        return sorted((t for t in self.tables.values() if t.database_id == database_id),
                      key=lambda t: t.table_id)

    def shards_of_table(self, table_id: int) -> list[ShardDescriptor]:
        out = [s for s in self.shards.values() if s.table_id == table_id]
        # empty first_key means minus infinity, so it sorts first
        out.sort(key=lambda s: (s.first_key != b"", s.first_key))
        return out

    def tables_of_quorum(self, quorum_id: int) -> list[TableMeta]:
        return sorted((t for t in self.tables.values() if t.quorum_id == quorum_id),
                      key=lambda t: t.table_id)

    def quorum_of_table(self, table_id: int) -> QuorumMeta | None:
        t = self.tables.get(table_id)
        return self.quorums.get(t.quorum_id) if t else None

    # -- canonical serialization ----------------------------------------

    def encode(self) -> bytes:
        w = Writer()
        w.u64(self.config_version)
        w.u64(self.next_database_id).u64(self.next_table_id)
        w.u64(self.next_shard_id).u64(self.next_quorum_id)
        w.u32(len(self.databases))
        for did in sorted(self.databases):
            db = self.databases[did]
            w.u64(db.database_id).bytes_(db.name.encode())
        w.u32(len(self.tables))
        for tid in sorted(self.tables):
            t = self.tables[tid]
            w.u64(t.table_id).u64(t.database_id).u64(t.quorum_id).bytes_(t.name.encode())
        w.u32(len(self.quorums))
        for qid in sorted(self.quorums):
            q = self.quorums[qid]
            w.u64(q.quorum_id)
            w.u32(len(q.active_node_ids))
            for n in sorted(q.active_node_ids):
                w.u64(n)
            w.u32(len(q.inactive_node_ids))
            for n in sorted(q.inactive_node_ids):
                w.u64(n)
            w.u64(q.primary_node_id)
        w.u32(len(self.shards))
        for sid in sorted(self.shards):
            self.shards[sid].encode(w)
        w.u32(len(self.servers))
        for nid in sorted(self.servers):
            s = self.servers[nid]
            w.u64(s.node_id).bytes_(s.endpoint.encode())
        return w.getvalue()

    @staticmethod
    def decode(data: bytes) -> "ClusterConfig":
        r = Reader(data)
        cfg = ClusterConfig(
            config_version=r.u64(),
            next_database_id=r.u64(), next_table_id=r.u64(),
            next_shard_id=r.u64(), next_quorum_id=r.u64(),
        )
        for _ in range(r.u32()):
            db = DatabaseMeta(r.u64(), r.bytes_().decode())
            cfg.databases[db.database_id] = db
        for _ in range(r.u32()):
            t = TableMeta(table_id=r.u64(), database_id=r.u64(),
                          quorum_id=r.u64(), name=r.bytes_().decode())
            cfg.tables[t.table_id] = t
        for _ in range(r.u32()):
            q = QuorumMeta(r.u64())
            q.active_node_ids = [r.u64() for _ in range(r.u32())]
            q.inactive_node_ids = [r.u64() for _ in range(r.u32())]
            q.primary_node_id = r.u64()
            cfg.quorums[q.quorum_id] = q
        for _ in range(r.u32()):
            s = ShardDescriptor.decode(r)
            cfg.shards[s.shard_id] = s
        for _ in range(r.u32()):
            srv = ServerMeta(r.u64(), r.bytes_().decode())
            cfg.servers[srv.node_id] = srv
        return cfg

    def clone(self) -> "ClusterConfig":
        return ClusterConfig.decode(self.encode())
