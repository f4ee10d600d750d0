"""The simulated world: every node of a cluster plus its clients run
against virtual time, a lossy network, and crash-prone disks.

Determinism is the whole point.  All randomness flows from named
`random.Random` streams derived from (scenario name, seed), events are
ordered by (time, sequence), and dictionaries are walked in sorted
order — the same seed always produces byte-identical traces, which
makes every failure replayable and shrinkable.

Each node keeps its own clock: a per-node rate (skew) and offset applied
to global time.  Nodes never see global time, so every lease and timeout
in the system is exercised against disagreeing clocks.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass

from ..client import ClientCore, ClientResult
from ..config import Tunables
from ..controller import ControllerNode
from ..messages import decode_frame
from ..shardserver import ShardServer
from ..storage.fs import VirtualFileSystem
from ..types import Command, Opcode, Status
from .net import VirtualNetwork
from .scenario import Scenario, Workload

TICK_MS = 50
PROBE_MS = 100
ADMIN_MS = 200
CLIENT_BASE = 1001


@dataclass
class Clock:
    rate: float
    offset: int

    def local(self, t: int) -> int:
        return int(t * self.rate) + self.offset


class NodeHost:
    """One machine: a filesystem that survives crashes, a clock, and the
    node process currently running on it (if any)."""

    def __init__(self, world: World, node_id: int, kind: str,
                 clock: Clock) -> None:
        self.world = world
        self.node_id = node_id
        self.kind = kind
        self.clock = clock
        self.fs = VirtualFileSystem()
        self.node: ControllerNode | ShardServer | None = None
        self.gen = 0

    def build(self) -> None:
        w = self.world
        local = self.clock.local(w.now)
        controllers = {c: f"c{c}:7080" for c in w.sc.controller_ids()}
        if self.kind == "controller":
            self.node = ControllerNode(self.node_id, self.fs, controllers,
                                       local, tun=w.tun,
                                       app_heartbeats=w.sc.app_heartbeats)
        else:
            self.node = ShardServer(self.node_id, self.fs, controllers,
                                    f"s{self.node_id}:7090", local,
                                    tun=w.tun,
                                    app_heartbeats=w.sc.app_heartbeats)
        self.gen += 1


class Driver:
    """Scripted application traffic through a real client core, with a
    record of everything acknowledged for the monitors to audit."""

    def __init__(self, world: World, client_id: int, core: ClientCore,
                 rng: random.Random, wl: Workload,
                 tables: list[int]) -> None:
        self.world = world
        self.client_id = client_id
        self.core = core
        self.rng = rng
        self.wl = wl
        self.tables = tables
        self.ops_left = wl.ops
        self.issued = 0
        self.outstanding: dict[int, dict] = {}
        self.acked: list[tuple[int, int, Opcode, int, bytes, bytes]] = []
        self.reads: list[tuple[int, bytes, bytes]] = []
        self.failures: list[tuple[int, str]] = []
        self.latencies: list[int] = []
        self.ok_times: list[tuple[int, int]] = []
        self.ok_count = 0
        self.seq_sources: dict[int, object] = {}
        self.seq_values: list[int] = []
        self.tx: dict | None = None
        self.tx_pending = False
        ops = [op for op, w in sorted(wl.mix.items()) if w > 0]
        weights = [wl.mix[op] for op in ops]
        self._ops, self._weights = ops, weights

    # -- issuing ---------------------------------------------------------

    def step(self, local: int):
        out = []
        for token in sorted(self.outstanding):
            res = self.core.poll(token)
            if res is not None:
                desc = self.outstanding.pop(token)
                out += self._absorb(local, desc, res)
        if self.world.issuing_allowed():
            while self.ops_left > 0 and len(self.outstanding) < 2:
                self.ops_left -= 1
                out += self._issue(local)
        return out

    def _key(self) -> bytes:
        return b"k%03d" % self.rng.randrange(self.wl.keyspace)

    def _value(self) -> bytes:
        self.issued += 1
        tag = b"c%do%d:" % (self.client_id, self.issued)
        return tag + b"x" * max(0, self.wl.value_size - len(tag))

    def _issue(self, local: int):
        if self.tx is not None and self.tx["phase"] in ("lock", "commit"):
            return self._tx_step(local)
        kind = self.rng.choices(self._ops, weights=self._weights)[0]
        tid = self.rng.choice(self.tables)
        if kind == "tx" and (self.tx is not None or self.tx_pending):
            kind = "put"  # one transaction at a time
        if kind == "put":
            key, value = self._key(), self._value()
            token = self.core.submit_writes(
                [(Opcode.SET, tid, key, value)], local)
            self.outstanding[token] = {
                "kind": "write", "t": self.world.now,
                "cmds": [(Opcode.SET, tid, key, value)]}
        elif kind == "delete":
            key = self._key()
            token = self.core.submit_writes(
                [(Opcode.DELETE, tid, key, b"")], local)
            self.outstanding[token] = {
                "kind": "write", "t": self.world.now,
                "cmds": [(Opcode.DELETE, tid, key, b"")]}
        elif kind == "add":
            key = b"cnt%d" % self.rng.randrange(4)
            delta = b"%d" % self.rng.randint(1, 9)
            token = self.core.submit_writes(
                [(Opcode.ADD, tid, key, delta)], local)
            self.outstanding[token] = {
                "kind": "write", "t": self.world.now,
                "cmds": [(Opcode.ADD, tid, key, delta)]}
        elif kind == "get":
            key = self._key()
            token = self.core.submit_get(tid, key, local)
            self.outstanding[token] = {"kind": "get", "t": self.world.now,
                                       "tid": tid, "key": key}
        elif kind == "list":
            token = self.core.submit_list(tid, local, prefix=b"k",
                                          count=10)
            self.outstanding[token] = {"kind": "list",
                                       "t": self.world.now, "tid": tid}
        elif kind == "seq":
            return self._seq_step(local, tid)
        elif kind == "tx":
            token = self.core.submit_tx_begin(
                self.world.quorum_of_table(tid), local)
            self.tx_pending = True
            self.outstanding[token] = {"kind": "txbegin",
                                       "t": self.world.now, "tid": tid}
        return []

    def _seq_step(self, local: int, tid: int):
        from ..client import SequenceSource
        src = self.seq_sources.get(tid)
        if src is None:
            src = SequenceSource(self.core, tid, b"__seq")
            self.seq_sources[tid] = src
        if src.ready:
            self.seq_values.append(src.take())
            return []
        token = src.start_fetch(local)
        self.outstanding[token] = {"kind": "seq", "t": self.world.now,
                                   "tid": tid}
        return []

    def _tx_step(self, local: int):
        tx = self.tx
        if tx["phase"] == "lock":
            key = tx["keys"][len(tx["locked"])]
            token = self.core.submit_lock(tx["qid"], tx["txid"],
                                          tx["tid"], key, local)
            self.outstanding[token] = {"kind": "lock", "t": self.world.now,
                                       "key": key, "txid": tx["txid"]}
            tx["phase"] = "waiting"
        elif tx["phase"] == "commit":
            cmds = [self.core.make_command(Opcode.SET, tx["tid"], key,
                                           self._value())
                    for key in tx["keys"]]
            token = self.core.submit_commit(tx["qid"], tx["txid"], cmds,
                                            local)
            self.outstanding[token] = {"kind": "commit", "cmds": cmds,
                                       "t": self.world.now,
                                       "txid": tx["txid"]}
            tx["phase"] = "waiting"
        return []

    # -- absorbing results -----------------------------------------------

    def _absorb(self, local: int, desc: dict, res: ClientResult):
        out = []
        ok = res.ok
        if ok:
            self.ok_count += 1
            self.latencies.append(self.world.now - desc["t"])
            self.ok_times.append((self.world.now,
                                  self.world.now - desc["t"]))
        else:
            self.failures.append((self.world.now, "%s %s/%s/%s" % (
                desc["kind"], res.network.value, res.timeout.value,
                res.cluster.value)))
        kind = desc["kind"]
        if kind == "write" and ok:
            for rid, (op, tid, key, value) in zip(res.request_ids,
                                                  desc["cmds"]):
                self.acked.append((self.core.client_id, rid, op, tid, key,
                                   value))
        elif kind == "get" and ok:
            if res.outcomes[0].status is Status.OK:
                self.reads.append((desc["tid"], desc["key"],
                                   res.outcomes[0].value))
        elif kind == "list" and ok:
            for key, value in res.outcomes[0].items:
                self.reads.append((desc["tid"], key, value))
        elif kind == "seq":
            self.seq_sources[desc["tid"]].feed(res)
        elif kind == "txbegin":
            self.tx_pending = False
            if ok:
                nkeys = self.rng.randint(1, 2)
                keys = sorted({b"tx%02d" % self.rng.randrange(8)
                               for _ in range(nkeys)})
                self.tx = {"phase": "lock", "txid": res.outcomes[0].total,
                           "tid": desc["tid"],
                           "qid": self.world.quorum_of_table(desc["tid"]),
                           "keys": keys, "locked": []}
        elif kind == "lock":
            tx = self.tx
            if tx is None or tx["txid"] != desc["txid"]:
                return out
            if ok:
                tx["locked"].append(desc["key"])
                tx["phase"] = "commit" if len(tx["locked"]) == \
                    len(tx["keys"]) else "lock"
            else:
                # contention or expiry: walk away cleanly
                out += self.core.rollback(tx["qid"], tx["txid"])
                self.tx = None
        elif kind == "commit":
            if ok:
                for cmd in desc["cmds"]:
                    self.acked.append((cmd.client_id, cmd.request_id,
                                       cmd.opcode, cmd.table_id, cmd.key,
                                       cmd.value))
            if self.tx is not None and self.tx["txid"] == desc["txid"]:
                self.tx = None
        return out


class World:
    def __init__(self, sc: Scenario, seed: str | int,
                 tun: Tunables | None = None,
                 injected: list[tuple[int, str, tuple]] | None = None):
        self.sc = sc
        self.seed = str(seed)
        self.tun = tun if tun is not None else Tunables()
        root = f"{sc.name}:{self.seed}"
        self.net = VirtualNetwork(random.Random(root + ":net"),
                                  sc.delay_min, sc.delay_max, sc.drop,
                                  sc.dup)
        clock_rng = random.Random(root + ":clock")
        self.fault_rng = random.Random(root + ":fault")
        self.now = 0
        self.heap: list[tuple] = []
        self.seq = 0
        self.trace_lines: list[str] = []
        self.monitors = None
        self.workload_end = sc.settle_ms + sc.duration_ms
        self.bootstrap_done = False
        self.bootstrap_at = 0
        self._admin_pending: tuple[int, object] | None = None
        self._admin_wait_until = 0

        self.hosts: dict[int, NodeHost] = {}
        for cid in sc.controller_ids():
            self.hosts[cid] = NodeHost(self, cid, "controller",
                                       self._clock(clock_rng, sc))
        for sid in sc.server_ids():
            self.hosts[sid] = NodeHost(self, sid, "server",
                                       self._clock(clock_rng, sc))
        for host in self.hosts.values():
            host.build()

        self.drivers: dict[int, Driver] = {}
        table_ids = {name: i + 1 for i, (name, _) in enumerate(sc.tables)}
        wanted = sc.workload.tables or [name for name, _ in sc.tables]
        driver_tables = [table_ids[name] for name in wanted]
        self._table_quorum = {
            i + 1: sc.quorum_id_of(qname)
            for i, (_, qname) in enumerate(sc.tables)}
        for i in range(sc.workload.clients):
            cid = CLIENT_BASE + i
            rng = random.Random(f"{root}:client{cid}")
            core = ClientCore(sc.controller_ids(), 0, tun=self.tun,
                              client_id=(1 << 40) | cid, rng=rng)
            self.drivers[cid] = Driver(self, cid, core, rng, sc.workload,
                                       driver_tables)

        self.injected = self._gen_chaos() if injected is None else injected
        for t, action, args in sc.events:
            self.schedule(t, "fault", (action, args))
        for t, action, args in self.injected:
            self.schedule(t, "fault", (action, args))
        for nid in sorted(self.hosts):
            self.schedule(TICK_MS, "tick", (nid, self.hosts[nid].gen))
        for cid in sorted(self.drivers):
            self.schedule(TICK_MS, "ctick", (cid,))
        self.schedule(ADMIN_MS, "admin", ())
        self.schedule(PROBE_MS, "probe", ())

    def _clock(self, rng: random.Random, sc: Scenario) -> Clock:
        rate = 1.0 + rng.uniform(-sc.clock_skew, sc.clock_skew)
        return Clock(rate, rng.randint(0, 1000))

    def _gen_chaos(self) -> list[tuple[int, str, tuple]]:
        ch = self.sc.chaos
        if ch is None or (ch.kills <= 0 and ch.partitions <= 0):
            return []
        pools = {"servers": self.sc.server_ids(),
                 "controllers": self.sc.controller_ids(),
                 "all": self.sc.controller_ids() + self.sc.server_ids()}
        pool = pools[ch.targets]
        rng = self.fault_rng
        events: list[tuple[int, str, tuple]] = []
        up_until: dict[int, int] = {}
        window = self.sc.duration_ms - 2000
        for _ in range(ch.kills):
            nid = rng.choice(pool)
            t = self.sc.settle_ms + rng.randint(0, max(1, window))
            if t < up_until.get(nid, 0):
                continue  # node hasn't been up long enough again
            down = rng.randint(1000, ch.max_down_ms)
            events.append((t, "crash", (nid,)))
            events.append((t + down, "restart", (nid,)))
            up_until[nid] = t + down + ch.min_up_ms
        everyone = self.sc.controller_ids() + self.sc.server_ids()
        clients = [CLIENT_BASE + i for i in range(self.sc.workload.clients)]
        for _ in range(ch.partitions):
            minority = rng.sample(sorted(everyone), rng.randint(1, 2))
            rest = [n for n in everyone if n not in minority] + clients
            t = self.sc.settle_ms + rng.randint(0, max(1, window))
            dur = rng.randint(2000, 8000)
            events.append((t, "partition", (frozenset(minority),
                                            frozenset(rest))))
            events.append((t + dur, "heal", ()))
        events.sort(key=lambda e: (e[0], e[1]))
        return events

    # -- plumbing --------------------------------------------------------

    def schedule(self, t: int, kind: str, data: tuple) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, data))

    def trace(self, text: str) -> None:
        self.trace_lines.append(f"{self.now:>8} {text}")

    def quorum_of_table(self, table_id: int) -> int:
        return self._table_quorum[table_id]

    def issuing_allowed(self) -> bool:
        return (self.bootstrap_done and self.sc.settle_ms <= self.now
                < self.workload_end)

    def live_hosts(self, kind: str | None = None) -> list[NodeHost]:
        return [h for _, h in sorted(self.hosts.items())
                if h.node is not None and (kind is None or h.kind == kind)]

    def _post(self, src: int, addressed) -> None:
        for dst, msg in addressed:
            for t, s, d, frame in self.net.send(self.now, src, dst, msg):
                self.schedule(t, "deliver", (s, d, frame))

    def _drain(self, host: NodeHost) -> None:
        node = host.node
        if node is None:
            return
        for peer in node.rebuilds:
            self.net.rebuild(host.node_id, peer)
            self.trace(f"conn rebuild {host.node_id}<->{peer}")
        node.rebuilds.clear()

    # -- event handlers --------------------------------------------------

    def run_until(self, t_end: int) -> None:
        while self.heap and self.heap[0][0] <= t_end:
            t, _, kind, data = heapq.heappop(self.heap)
            self.now = t
            getattr(self, "_ev_" + kind)(*data)
        self.now = t_end

    def _ev_deliver(self, src: int, dst: int, frame: bytes) -> None:
        msg = decode_frame(frame)
        if dst in self.hosts:
            host = self.hosts[dst]
            if host.node is None:
                return
            local = host.clock.local(self.now)
            self._post(dst, host.node.on_message(local, src, msg))
            self._drain(host)
        elif dst in self.drivers:
            drv = self.drivers[dst]
            self._post(dst, drv.core.on_message(self._client_clock(dst),
                                                src, msg))

    def _client_clock(self, cid: int) -> int:
        return self.now  # clients run on true time; skew lives on nodes

    def _ev_tick(self, nid: int, gen: int) -> None:
        host = self.hosts[nid]
        if host.gen != gen or host.node is None:
            return
        local = host.clock.local(self.now)
        self._post(nid, host.node.tick(local))
        self._drain(host)
        self.schedule(self.now + TICK_MS, "tick", (nid, gen))

    def _ev_ctick(self, cid: int) -> None:
        drv = self.drivers[cid]
        local = self._client_clock(cid)
        self._post(cid, drv.core.tick(local))
        self._post(cid, drv.step(local))
        self.schedule(self.now + TICK_MS, "ctick", (cid,))

    def _ev_probe(self) -> None:
        if self.monitors is not None:
            self.monitors.probe(self.now)
        self.schedule(self.now + PROBE_MS, "probe", ())

    def _ev_fault(self, action: str, args: tuple) -> None:
        if action == "crash":
            self.crash(args[0])
        elif action == "restart":
            self.restart(args[0])
        elif action == "partition":
            self.net.partition([set(g) for g in args])
            groups = "|".join(",".join(str(n) for n in sorted(g))
                              for g in args)
            self.trace(f"partition {groups}")
        elif action == "heal":
            self.net.heal()
            self.trace("heal")
        elif action == "stuck":
            self.net.stick(args[0], args[1])
            self.trace(f"stuck {args[0]}-{args[1]}")

    def crash(self, nid: int) -> None:
        host = self.hosts[nid]
        if host.node is None:
            return
        host.node = None
        host.gen += 1
        host.fs.crash(self.fault_rng)
        self.trace(f"crash {nid}")

    def restart(self, nid: int) -> None:
        host = self.hosts[nid]
        if host.node is not None:
            return
        host.build()
        self.trace(f"restart {nid}")
        self.schedule(self.now + 1, "tick", (nid, host.gen))

    # -- bootstrap admin -------------------------------------------------

    def _ev_admin(self) -> None:
        if self.bootstrap_done:
            return
        self.schedule(self.now + ADMIN_MS, "admin", ())
        master = None
        for host in self.live_hosts("controller"):
            local = host.clock.local(self.now)
            if host.node.is_master(local) and host.node.master_ready:
                master = host
                break
        if master is None:
            return
        if self._admin_pending is not None:
            cid, token = self._admin_pending
            owner = self.hosts[cid].node
            if owner is not None and self.now < self._admin_wait_until:
                ready = [r for r in owner.rest_ready if r[0] == token]
                if not ready:
                    return  # still replicating
                owner.rest_ready.remove(ready[0])
            self._admin_pending = None
        step = self._bootstrap_gap(master.node.config)
        if step is None:
            self.bootstrap_done = True
            self.bootstrap_at = self.now
            self.trace("bootstrap complete v%d"
                       % master.node.config.config_version)
            return
        if step == "wait":
            return
        method, path, payload = step
        local = master.clock.local(self.now)
        res = master.node.handle_http(local, method, path,
                                      json.dumps(payload).encode())
        if res.kind == "pending":
            self._post(master.node_id, res.messages)
            self._admin_pending = (master.node_id, res.token)
            self._admin_wait_until = self.now + 3000
            self.trace(f"admin {method} {path}")
        elif res.kind == "json" and res.code >= 400:
            self.trace(f"admin {method} {path} -> {res.code}")

    def _bootstrap_gap(self, cfg):
        sc = self.sc
        if any(sid not in cfg.servers for sid in sc.server_ids()):
            return "wait"
        if cfg.database_by_name(sc.database) is None:
            return ("POST", "/databases", {"name": sc.database})
        db_id = cfg.database_by_name(sc.database).database_id
        for i, (_, members) in enumerate(sc.quorums):
            if (i + 1) not in cfg.quorums:
                return ("POST", "/quorums", {"node_ids": members})
        for i, (tname, qname) in enumerate(sc.tables):
            if (i + 1) not in cfg.tables:
                return ("POST", "/tables",
                        {"database_id": db_id,
                         "quorum_id": sc.quorum_id_of(qname),
                         "name": tname})
        return None

    # -- reporting -------------------------------------------------------

    def counters(self) -> dict:
        ok = sum(d.ok_count for d in self.drivers.values())
        failed = sum(len(d.failures) for d in self.drivers.values())
        issued = sum(d.issued for d in self.drivers.values())
        data_rounds = 0
        if self.monitors is not None:
            data_rounds = sum(len(v)
                              for v in self.monitors.collected.values())
        config_rounds = max(
            (h.node.applied_round for h in self.live_hosts("controller")),
            default=0)
        return {"ops_ok": ok, "ops_failed": failed,
                "values_written": issued,
                "rounds_data": data_rounds,
                "rounds_config": config_rounds,
                "net_delivered": self.net.delivered,
                "net_dropped": self.net.dropped}


@dataclass
class SimReport:
    scenario: str
    seed: str
    counters: dict
    violations: list[str]
    trace_lines: list[str]
    master_history: list[tuple[int, tuple[int, ...]]]
    primary_history: dict[int, list[tuple[int, tuple[int, ...]]]]
    latencies: list[int]
    failures: list[tuple[int, str]]
    ok_times: list[tuple[int, int]]  # (completion time, latency)

    @property
    def passed(self) -> bool:
        return not self.violations

    def text(self) -> str:
        lines = [f"scenario {self.scenario} seed {self.seed}"]
        lines += self.trace_lines
        for key in sorted(self.counters):
            lines.append(f"  {key} {self.counters[key]}")
        for v in self.violations:
            lines.append("violation " + v)
        lines.append("result " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def run_world(sc: Scenario, seed: str | int, tun: Tunables | None = None,
              injected: list[tuple[int, str, tuple]] | None = None,
              ) -> SimReport:
    from .monitors import Monitors
    world = World(sc, seed, tun=tun, injected=injected)
    monitors = Monitors(world, set(sc.monitors))
    world.monitors = monitors
    world.run_until(world.workload_end)
    # the drain phase: all faults lifted, crashed nodes brought back, and
    # everything in flight given time to converge before the audit
    world.net.heal()
    world.net.stuck.clear()
    for nid in sorted(world.hosts):
        if world.hosts[nid].node is None:
            world.restart(nid)
    world.run_until(world.workload_end + sc.drain_ms)
    monitors.final(world.now)
    latencies = sorted(
        lat for d in world.drivers.values() for lat in d.latencies)
    failures = sorted(
        f for d in world.drivers.values() for f in d.failures)
    ok_times = sorted(
        t for d in world.drivers.values() for t in d.ok_times)
    return SimReport(sc.name, str(seed), world.counters(),
                     monitors.violations, world.trace_lines,
                     monitors.master_history, monitors.primary_history,
                     latencies, failures, ok_times)
