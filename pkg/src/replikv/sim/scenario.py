"""Scenario files: a small line grammar describing a cluster, a
workload, faults to inject, and the invariants to watch.

Example::

    name primary-kill
    cluster controllers=3 servers=3
    quorum q1 nodes=101,102,103
    table t1 quorum=q1
    net delay=1..50 drop=0.01 dup=0.01
    clock-skew 0.01
    workload clients=2 ops=200 keyspace=40 value=64 mix=put:50,get:40,add:10
    settle 15000
    duration 60000
    monitors agreement,config,lease,durability,read
    at 30000 crash 101
    at 36000 restart 101
    chaos kills=3 targets=servers min-up=5000 max-down=4000

Blank lines and ``#`` comments are ignored.  Times are virtual
milliseconds from the start of the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

ALL_MONITORS = ("agreement", "config", "lease", "durability", "read")
DEFAULT_MIX = {"put": 50, "get": 35, "delete": 5, "add": 5, "seq": 5}


@dataclass
class Workload:
    clients: int = 2
    ops: int = 200
    keyspace: int = 40
    value_size: int = 64
    mix: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_MIX))
    tables: list[str] = field(default_factory=list)  # empty = all tables


@dataclass
class Chaos:
    kills: int = 0
    partitions: int = 0
    targets: str = "servers"      # servers | controllers | all
    min_up_ms: int = 5000
    max_down_ms: int = 4000


@dataclass
class Scenario:
    name: str = "unnamed"
    controllers: int = 3
    servers: int = 3
    quorums: list[tuple[str, list[int]]] = field(default_factory=list)
    database: str = "db"
    tables: list[tuple[str, str]] = field(default_factory=list)
    delay_min: int = 1
    delay_max: int = 100
    drop: float = 0.01
    dup: float = 0.01
    clock_skew: float = 0.0
    app_heartbeats: bool = True
    workload: Workload = field(default_factory=Workload)
    settle_ms: int = 15000
    duration_ms: int = 60000
    drain_ms: int = 15000
    monitors: tuple[str, ...] = ALL_MONITORS
    events: list[tuple[int, str, tuple]] = field(default_factory=list)
    chaos: Chaos | None = None

    def controller_ids(self) -> list[int]:
        return list(range(1, self.controllers + 1))

    def server_ids(self) -> list[int]:
        return list(range(101, 101 + self.servers))

    def quorum_id_of(self, name: str) -> int:
        for i, (qname, _) in enumerate(self.quorums):
            if qname == name:
                return i + 1
        raise ValueError(f"unknown quorum {name!r}")

    def table_id_of(self, name: str) -> int:
        for i, (tname, _) in enumerate(self.tables):
            if tname == name:
                return i + 1
        raise ValueError(f"unknown table {name!r}")


def _kv(parts: list[str]) -> dict[str, str]:
    out = {}
    for part in parts:
        key, _, value = part.partition("=")
        if not value:
            raise ValueError(f"expected key=value, got {part!r}")
        out[key] = value
    return out


def _ids(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def parse_scenario(text: str) -> Scenario:
    sc = Scenario()
    sc.tables = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            _parse_line(sc, line)
        except (ValueError, KeyError, IndexError) as exc:
            raise ValueError(f"scenario line {lineno}: {raw.strip()!r}: "
                             f"{exc}") from exc
    if not sc.quorums:
        sc.quorums = [("q1", sc.server_ids())]
    if not sc.tables:
        sc.tables = [("t1", sc.quorums[0][0])]
    for _, qname in sc.tables:
        sc.quorum_id_of(qname)  # validates the reference
    for _, members in sc.quorums:
        unknown = set(members) - set(sc.server_ids())
        if unknown:
            raise ValueError(f"quorum names unknown servers {unknown}")
    sc.events.sort(key=lambda e: e[0])
    return sc


def _parse_line(sc: Scenario, line: str) -> None:
    word, *rest = line.split()
    if word == "name":
        sc.name = rest[0]
    elif word == "cluster":
        kv = _kv(rest)
        sc.controllers = int(kv.get("controllers", sc.controllers))
        sc.servers = int(kv.get("servers", sc.servers))
    elif word == "quorum":
        kv = _kv(rest[1:])
        sc.quorums.append((rest[0], _ids(kv["nodes"])))
    elif word == "database":
        sc.database = rest[0]
    elif word == "table":
        kv = _kv(rest[1:])
        sc.tables.append((rest[0], kv["quorum"]))
    elif word == "net":
        kv = _kv(rest)
        if "delay" in kv:
            lo, _, hi = kv["delay"].partition("..")
            sc.delay_min, sc.delay_max = int(lo), int(hi or lo)
        sc.drop = float(kv.get("drop", sc.drop))
        sc.dup = float(kv.get("dup", sc.dup))
    elif word == "clock-skew":
        sc.clock_skew = float(rest[0])
    elif word == "app-heartbeats":
        sc.app_heartbeats = rest[0] == "on"
    elif word == "workload":
        kv = _kv(rest)
        w = sc.workload
        w.clients = int(kv.get("clients", w.clients))
        w.ops = int(kv.get("ops", w.ops))
        w.keyspace = int(kv.get("keyspace", w.keyspace))
        w.value_size = int(kv.get("value", w.value_size))
        if "tables" in kv:
            w.tables = kv["tables"].split(",")
        if "mix" in kv:
            w.mix = {}
            for part in kv["mix"].split(","):
                op, _, weight = part.partition(":")
                w.mix[op] = int(weight)
    elif word == "settle":
        sc.settle_ms = int(rest[0])
    elif word == "duration":
        sc.duration_ms = int(rest[0])
    elif word == "drain":
        sc.drain_ms = int(rest[0])
    elif word == "monitors":
        names = tuple(rest[0].split(","))
        unknown = set(names) - set(ALL_MONITORS)
        if unknown:
            raise ValueError(f"unknown monitors {unknown}")
        sc.monitors = names
    elif word == "at":
        t = int(rest[0])
        action = rest[1]
        if action in ("crash", "restart"):
            sc.events.append((t, action, (int(rest[2]),)))
        elif action == "partition":
            spec = " ".join(rest[2:])
            groups = tuple(frozenset(_ids(g.strip()))
                           for g in spec.split("|"))
            sc.events.append((t, "partition", groups))
        elif action == "heal":
            sc.events.append((t, "heal", ()))
        elif action == "stuck":
            a, _, b = rest[2].partition("-")
            sc.events.append((t, "stuck", (int(a), int(b))))
        else:
            raise ValueError(f"unknown action {action!r}")
    elif word == "chaos":
        kv = _kv(rest)
        sc.chaos = Chaos(kills=int(kv.get("kills", 3)),
                         partitions=int(kv.get("partitions", 0)),
                         targets=kv.get("targets", "servers"),
                         min_up_ms=int(kv.get("min-up", 5000)),
                         max_down_ms=int(kv.get("max-down", 4000)))
    else:
        raise ValueError(f"unknown directive {word!r}")
