"""Controller cluster behavior: election, config replication, REST,
heartbeat monitoring, primary leases, and reactivation."""

from __future__ import annotations

import json

import pytest

from replikv.config import Tunables
from replikv.controller import ControllerNode, RestResult
from replikv.messages import (ActivationDone, ActivationRestart, ClientConfig,
                              ClientGetConfig, ClientWriteResult, Heartbeat,
                              HeartbeatAck, PrimaryGrant, decode_frame,
                              decode_grants)
from replikv.storage.fs import VirtualFileSystem
from replikv.types import Status, TrackReport, encode_track_reports

CONTROLLERS = {1: "c1:7080", 2: "c2:7080", 3: "c3:7080"}


class Pump:
    """Hosts controllers with instant delivery and a shared clock.

    Every message takes one wire round trip through its frame codec.
    Dead nodes neither tick nor receive; their mail is dropped.
    """

    def __init__(self, tun: Tunables | None = None):
        self.tun = tun or Tunables()
        self.now = 0.0
        self.fss = {n: VirtualFileSystem() for n in CONTROLLERS}
        self.nodes: dict[int, ControllerNode] = {}
        self.dead: set[int] = set()
        self.log: list[tuple[int, int, object]] = []  # (src, dst, msg)
        self.taps: dict[int, list[tuple[int, object]]] = {}  # dst -> [(src, msg)]
        self.queue: list[tuple[int, int, object]] = []
        for n in CONTROLLERS:
            self.nodes[n] = ControllerNode(n, self.fss[n], CONTROLLERS,
                                           self.now, tun=self.tun)

    def restart(self, node_id: int) -> None:
        self.dead.discard(node_id)
        self.nodes[node_id] = ControllerNode(node_id, self.fss[node_id],
                                             CONTROLLERS, self.now,
                                             tun=self.tun)

    def post(self, src: int, addressed) -> None:
        for dst, msg in addressed:
            msg = decode_frame(msg.encode_frame())
            self.log.append((src, dst, msg))
            if dst in self.taps:
                self.taps[dst].append((src, msg))
            elif dst in self.nodes and dst not in self.dead:
                self.queue.append((src, dst, msg))

    def deliver(self) -> None:
        while self.queue:
            src, dst, msg = self.queue.pop(0)
            if dst in self.dead:
                continue
            self.post(dst, self.nodes[dst].on_message(self.now, src, msg))

    def advance(self, ms: float, step: float = 50.0) -> None:
        end = self.now + ms
        while self.now < end:
            self.now = min(self.now + step, end)
            for n, node in sorted(self.nodes.items()):
                if n not in self.dead:
                    self.post(n, node.tick(self.now))
            self.deliver()

    # -- conveniences ----------------------------------------------------

    def masters(self) -> list[int]:
        return [n for n, node in self.nodes.items()
                if n not in self.dead and node.is_master(self.now)]

    def master(self) -> ControllerNode:
        ids = self.masters()
        assert len(ids) == 1, f"expected one master, found {ids}"
        return self.nodes[ids[0]]

    def elect(self) -> ControllerNode:
        self.advance(8000)
        node = self.master()
        assert node.master_ready
        return node

    def heartbeat(self, server_id: int, reports=(),
                  endpoint: str = "") -> None:
        hb = Heartbeat(server_id, endpoint or f"s{server_id}:7090",
                       int(self.now), encode_track_reports(list(reports)))
        self.taps.setdefault(server_id, [])
        for n in sorted(self.nodes):
            if n not in self.dead:
                self.post(n, self.nodes[n].on_message(self.now, server_id,
                                                      hb))
        self.deliver()

    def rest(self, node_id: int, method: str, path: str,
             payload=None) -> tuple[int, dict]:
        body = json.dumps(payload).encode() if payload is not None else b""
        node = self.nodes[node_id]
        result = node.handle_http(self.now, method, path, body)
        if result.kind == "forward":
            target = next(n for n, ep in CONTROLLERS.items()
                          if ep == result.endpoint)
            return self.rest(target, method, path, payload)
        if result.kind == "json":
            return result.code, result.body
        self.post(node_id, result.messages)
        self.deliver()
        for _ in range(200):
            for token, code, body_out in node.rest_ready:
                if token == result.token:
                    node.rest_ready.remove((token, code, body_out))
                    return code, body_out
            self.advance(50)
        raise AssertionError("REST request never completed")

    def sent_to(self, dst: int):
        return self.taps.get(dst, [])


@pytest.fixture
def pump():
    return Pump()


def bootstrap_quorum(pump: Pump) -> int:
    """Register three servers and build a quorum over them."""
    pump.elect()
    for sid in (101, 102, 103):
        pump.heartbeat(sid)
    pump.advance(500)
    code, body = pump.rest(pump.master().node_id, "POST", "/quorums",
                           {"node_ids": [101, 102, 103]})
    assert code == 200
    return body["id"]


def quorum_reports(pump: Pump, qid: int, paxos_id: int):
    return [TrackReport(qid, paxos_id)]


def test_exactly_one_master_elected(pump):
    pump.advance(8000)
    assert len(pump.masters()) == 1
    assert pump.master().master_ready


def test_followers_forward_and_masterless_rejects(pump):
    node = pump.nodes[1]
    result = node.handle_http(pump.now, "POST", "/databases", b'{"name":"x"}')
    assert result.kind == "json" and result.code == 503
    master = pump.elect()
    others = [n for n in CONTROLLERS if n != master.node_id]
    result = pump.nodes[others[0]].handle_http(
        pump.now, "POST", "/databases", b'{"name":"x"}')
    assert result.kind == "forward"
    assert result.endpoint == CONTROLLERS[master.node_id]


def test_rest_mutations_replicate_to_all(pump):
    master = pump.elect()
    for sid in (101, 102):
        pump.heartbeat(sid)
    pump.advance(500)
    code, body = pump.rest(master.node_id, "POST", "/quorums",
                           {"node_ids": [101, 102]})
    assert code == 200
    qid = body["id"]
    code, body = pump.rest(master.node_id, "POST", "/databases",
                           {"name": "inventory"})
    assert code == 200
    dbid = body["id"]
    assert body["config_version"] > 0
    code, body = pump.rest(master.node_id, "POST", "/tables",
                           {"database_id": dbid, "quorum_id": qid,
                            "name": "items"})
    assert code == 200
    pump.advance(1000)
    for n, node in pump.nodes.items():
        assert node.config.databases[dbid].name == "inventory"
        assert len(node.config.tables) == 1
        assert len(node.config.shards) == 1  # the table's initial shard
    status = pump.nodes[1].status_report(pump.now)
    assert status["databases"][0]["name"] == "inventory"
    assert status["tables"][0]["name"] == "items"


def test_rest_rejects_garbage_and_unknowns(pump):
    master = pump.elect()
    code, _ = pump.rest(master.node_id, "POST", "/databases",
                        {"wrong_field": 1})
    assert code == 400
    result = master.handle_http(pump.now, "POST", "/databases", b"{not json")
    assert result.kind == "json" and result.code == 400
    code, _ = pump.rest(master.node_id, "POST", "/tables",
                        {"database_id": 77, "quorum_id": 1, "name": "t"})
    assert code == 400
    code, _ = pump.rest(master.node_id, "DELETE", "/quorums/9")
    assert code == 400
    code, _ = pump.rest(master.node_id, "POST", "/quorums",
                        {"node_ids": [55]})  # unregistered server
    assert code == 400


def test_duplicate_database_name_conflicts(pump):
    master = pump.elect()
    code, _ = pump.rest(master.node_id, "POST", "/databases", {"name": "db"})
    assert code == 200
    code, body = pump.rest(master.node_id, "POST", "/databases",
                           {"name": "db"})
    assert code == 409
    assert body["status"] == "error"


def test_heartbeat_registers_server_and_updates_endpoint(pump):
    master = pump.elect()
    pump.heartbeat(101, endpoint="first:1")
    pump.advance(500)
    assert master.config.servers[101].endpoint == "first:1"
    pump.heartbeat(101, endpoint="second:2")
    pump.advance(500)
    assert master.config.servers[101].endpoint == "second:2"


def test_primary_appointed_and_leased(pump):
    qid = bootstrap_quorum(pump)
    for _ in range(6):
        for sid in (101, 102, 103):
            pump.heartbeat(sid, quorum_reports(pump, qid, 5))
        pump.advance(400)
    master = pump.master()
    q = master.config.quorums[qid]
    assert q.primary_node_id in (101, 102, 103)
    primary = q.primary_node_id
    # the push right after appointment lets the primary serve without
    # waiting a heartbeat period
    pushes = [m for _, m in pump.sent_to(primary)
              if isinstance(m, PrimaryGrant)]
    assert pushes and pushes[0].quorum_id == qid
    assert pushes[0].duration_ms == int(pump.tun.primary_lease_ms)
    # afterwards every ack to the primary renews the lease
    pump.heartbeat(primary, quorum_reports(pump, qid, 6))
    acks = [m for _, m in pump.sent_to(primary)
            if isinstance(m, HeartbeatAck) and m.grants]
    assert acks
    assert decode_grants(acks[-1].grants) == \
        [(qid, int(pump.tun.primary_lease_ms))]


def test_silent_node_deactivated_primary_moves(pump):
    qid = bootstrap_quorum(pump)
    for _ in range(6):
        for sid in (101, 102, 103):
            pump.heartbeat(sid, quorum_reports(pump, qid, 5))
        pump.advance(400)
    master = pump.master()
    old_primary = master.config.quorums[qid].primary_node_id
    survivors = [s for s in (101, 102, 103) if s != old_primary]
    # the primary goes silent; the others keep reporting
    for _ in range(30):
        for sid in survivors:
            pump.heartbeat(sid, quorum_reports(pump, qid, 8))
        pump.advance(400)
    q = master.config.quorums[qid]
    assert old_primary in q.inactive_node_ids
    assert q.primary_node_id in survivors
    # replacement waited out every lease the old primary may still hold
    grant_msgs = [(s, d, m) for s, d, m in pump.log
                  if isinstance(m, PrimaryGrant) and d != old_primary]
    assert grant_msgs, "new primary never received its lease"


def test_last_active_member_is_never_deactivated(pump):
    qid = bootstrap_quorum(pump)
    for _ in range(4):
        for sid in (101, 102, 103):
            pump.heartbeat(sid, quorum_reports(pump, qid, 5))
        pump.advance(400)
    # every server goes silent; the quorum must keep one active member
    pump.advance(20000)
    q = pump.master().config.quorums[qid]
    assert len(q.active_node_ids) == 1


def test_activation_round_trip(pump):
    qid = bootstrap_quorum(pump)
    for _ in range(6):
        for sid in (101, 102, 103):
            pump.heartbeat(sid, quorum_reports(pump, qid, 5))
        pump.advance(400)
    master = pump.master()
    victim = [s for s in (101, 102, 103)
              if s != master.config.quorums[qid].primary_node_id][0]
    survivors = [s for s in (101, 102, 103) if s != victim]
    for _ in range(30):
        for sid in survivors:
            pump.heartbeat(sid, quorum_reports(pump, qid, 10))
        pump.advance(400)
    assert victim in master.config.quorums[qid].inactive_node_ids
    primary = master.config.quorums[qid].primary_node_id

    # the node comes back and reports nearly caught up
    for _ in range(8):
        for sid in survivors:
            pump.heartbeat(sid, quorum_reports(pump, qid, 20))
        pump.heartbeat(victim, quorum_reports(pump, qid, 19))
        pump.advance(300)
        restarts = [m for _, m in pump.sent_to(primary)
                    if isinstance(m, ActivationRestart)]
        if restarts:
            break
    restarts = [m for _, m in pump.sent_to(primary)
                if isinstance(m, ActivationRestart)]
    assert restarts and restarts[-1].node_id == victim
    # the primary confirms the node took part in a full round
    done = ActivationDone(qid, victim, 21)
    pump.post(primary, [(master.node_id, done)])
    pump.deliver()
    pump.advance(1000)
    q = master.config.quorums[qid]
    assert victim in q.active_node_ids


def test_shard_map_follows_primary_reports(pump):
    qid = bootstrap_quorum(pump)
    master = pump.master()
    code, body = pump.rest(master.node_id, "POST", "/databases",
                           {"name": "db"})
    dbid = body["id"]
    code, body = pump.rest(master.node_id, "POST", "/tables",
                           {"database_id": dbid, "quorum_id": qid,
                            "name": "t"})
    table_id = body["id"]
    initial = next(iter(master.config.shards.values()))
    for _ in range(6):
        for sid in (101, 102, 103):
            pump.heartbeat(sid, quorum_reports(pump, qid, 5))
        pump.advance(400)
    primary = master.config.quorums[qid].primary_node_id
    # primary reports the shard split in two
    left = type(initial)(initial.shard_id, table_id, b"", b"m", False)
    right = type(initial)(initial.shard_id | (1 << 63), table_id,
                          b"m", b"", True)
    report = [TrackReport(qid, 9, (left, right))]
    for _ in range(6):
        pump.heartbeat(primary, report)
        pump.advance(300)
    shards = sorted(master.config.shards.values(),
                    key=lambda s: s.shard_id)
    assert len(shards) == 2
    assert shards[0].last_key == b"m"
    assert shards[1].first_key == b"m"
    assert shards[1].is_split_result


def test_manual_activation_of_active_node_rejected(pump):
    qid = bootstrap_quorum(pump)
    code, _ = pump.rest(pump.master().node_id, "POST",
                        f"/quorums/{qid}/activate/101")
    assert code == 409
    code, _ = pump.rest(pump.master().node_id, "POST",
                        f"/quorums/{qid}/activate/999")
    assert code == 400


def test_clients_get_config_and_pushes(pump):
    master = pump.elect()
    client_id = 5001
    pump.taps[client_id] = []
    reply = master.on_message(pump.now, client_id, ClientGetConfig(7))
    assert len(reply) == 1
    dst, msg = reply[0]
    assert dst == client_id and isinstance(msg, ClientConfig)
    assert msg.request_id == 7
    assert msg.master_node_id == master.node_id
    # a mutation triggers an unsolicited push with request_id 0
    pump.rest(master.node_id, "POST", "/databases", {"name": "db"})
    pump.advance(500)
    pushes = [m for _, m in pump.sent_to(client_id)
              if isinstance(m, ClientConfig) and m.request_id == 0]
    assert pushes


def test_master_failover_elects_replacement(pump):
    first = pump.elect()
    pump.rest(first.node_id, "POST", "/databases", {"name": "db"})
    pump.dead.add(first.node_id)
    pump.advance(4 * pump.tun.master_lease_ms)
    second = pump.master()
    assert second.node_id != first.node_id
    assert second.master_ready
    # the new master still has the replicated config
    assert any(d.name == "db" for d in second.config.databases.values())
    code, _ = pump.rest(second.node_id, "POST", "/databases", {"name": "e"})
    assert code == 200


def test_controller_restart_rejoins_with_config(pump):
    master = pump.elect()
    pump.rest(master.node_id, "POST", "/databases", {"name": "db"})
    pump.advance(500)
    follower = next(n for n in CONTROLLERS if n != master.node_id)
    pump.dead.add(follower)
    pump.rest(master.node_id, "POST", "/databases", {"name": "db2"})
    pump.advance(2000)
    pump.restart(follower)
    pump.advance(3000)
    names = {d.name for d in pump.nodes[follower].config.databases.values()}
    assert names == {"db", "db2"}


def test_truncate_forwards_to_primary(pump):
    qid = bootstrap_quorum(pump)
    master = pump.master()
    _, body = pump.rest(master.node_id, "POST", "/databases", {"name": "db"})
    _, body = pump.rest(master.node_id, "POST", "/tables",
                        {"database_id": body["id"], "quorum_id": qid,
                         "name": "t"})
    table_id = body["id"]
    for _ in range(6):
        for sid in (101, 102, 103):
            pump.heartbeat(sid, quorum_reports(pump, qid, 5))
        pump.advance(400)
    primary = master.config.quorums[qid].primary_node_id
    result = master.handle_http(pump.now, "POST",
                                f"/tables/{table_id}/truncate", b"")
    assert result.kind == "pending"
    writes = [m for _, m in result.messages]
    assert len(writes) == 1
    pump.post(master.node_id, result.messages)
    write = pump.sent_to(primary)[-1][1]
    ack = ClientWriteResult(write.request_id, int(Status.OK), b"", 0,
                            master.config.config_version)
    pump.post(primary, [(master.node_id, ack)])
    pump.deliver()
    done = [r for r in master.rest_ready if r[0] == result.token]
    assert done and done[0][1] == 200


def test_status_and_metrics_shapes(pump):
    master = pump.elect()
    status = master.status_report(pump.now)
    for key in ("node_id", "is_master", "master_node_id", "config_version",
                "databases", "tables", "quorums", "servers", "shards"):
        assert key in status
    json.dumps(status)  # must be serializable as-is
    metrics = master.metrics(pump.now)
    assert metrics["is_master"] == 1
    assert all(isinstance(v, int) for v in metrics.values())
    json.dumps(metrics)
