"""Controller node: replicated cluster config, master election, health.

A small set of controllers keeps the cluster metadata — databases,
tables, quorums, shard map, server registry — agreed through a majority
replication track.  One controller at a time holds the master lease and
does all the active work: it processes heartbeats, deactivates silent
shard servers, appoints and leases quorum primaries, walks nodes through
reactivation, and accepts management mutations.  The other controllers
replicate the config, answer reads, and forward mutations.

Primary leases are the one piece of timing-sensitive state: the master
only ever grants a lease to the committed primary of a quorum, and
tracks a conservative local bound on when every grant it sent must have
expired.  A replacement primary is never appointed before that bound
passes, and a freshly elected master sits out one full grant period
before appointing anyone new, so two shard servers can never both
believe they own the same quorum even across a master failover.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum

from .config import Tunables
from .configsm import CONFIG_OPCODES, apply_config_command
from .conn import ConnWatch
from .lease import LeaseNode
from .messages import (ActivationDone, ActivationRestart, CatchupDbBegin,
                       CatchupDbChunk, CatchupDbEnd, CatchupDbRequired,
                       CatchupRequest, CatchupRound, ClientConfig,
                       ClientGetConfig, ClientWrite, ClientWriteResult,
                       ConfigPush, ConfigSnapshot, ConfigSnapshotRequest,
                       Heartbeat, HeartbeatAck, Hello, LeasePrepare,
                       LeasePrepareGrant, LeasePrepareReject, LeasePropose,
                       LeaseProposeAccept, LeaseProposeReject, MasterAnnounce,
                       Message, PaxosLearnProposal, PaxosLearnValue,
                       PaxosPrepare, PaxosPrepareGrant, PaxosPrepareReject,
                       PaxosPropose, PaxosProposeAccept, PaxosProposeReject,
                       PaxosRequestValue, PaxosRoundDecided, Ping, Pong,
                       PrimaryGrant, encode_grants)
from .paxos import QuorumKind
from .rlog import Addressed, ReplicatedLog, Resolved
from .storage.engine import Outcome, StorageEngine
from .storage.fs import FileSystem
from .storage.statefiles import (bump_run_id, load_config_snapshot,
                                 save_config_snapshot)
from .types import (ClusterConfig, Command, Opcode, Status, TrackReport,
                    decode_commands, decode_track_reports, encode_commands,
                    encode_node_ids, encode_shard_list)

log = logging.getLogger("replikv.controller")

# the config replication track and its quorum label on the wire
CONFIG_TRACK = 1
CONFIG_QUORUM = 0

# margin added to a grant's expiry bound for the unsolicited push, whose
# transit time (unlike an ack's) is not covered by the echoed send time
GRANT_TRANSIT_GRACE_MS = 1000.0

# client identity used for controller-originated data writes (truncate)
CONTROLLER_CLIENT_BIT = 1 << 62

LEASE_MSGS = (LeasePrepare, LeasePrepareGrant, LeasePrepareReject,
              LeasePropose, LeaseProposeAccept, LeaseProposeReject)
RLOG_MSGS = (PaxosPrepare, PaxosPrepareGrant, PaxosPrepareReject,
             PaxosPropose, PaxosProposeAccept, PaxosProposeReject,
             PaxosLearnValue, PaxosLearnProposal, PaxosRequestValue,
             PaxosRoundDecided, CatchupRequest, CatchupRound,
             CatchupDbRequired, CatchupDbBegin, CatchupDbChunk, CatchupDbEnd)


@dataclass
class HeartbeatRecord:
    """Latest report from one shard server; kept only on the master."""

    node_id: int
    endpoint: str
    received_at: float
    send_time_ms: int
    tracks: dict[int, TrackReport] = field(default_factory=dict)


class ActivationPhase(Enum):
    CATCHING_UP = "catching_up"
    RESTART_ROUND_SENT = "restart_round_sent"


@dataclass
class ActivationProcess:
    """Reactivation of one node in one quorum; at most one per quorum."""

    quorum_id: int
    node_id: int
    phase: ActivationPhase
    last_restart_sent: float = 0.0


@dataclass
class RestResult:
    """Outcome of one HTTP request plus any messages it produced.

    kind "json": code/body are final.  kind "forward": the host proxies
    the request to the master at `endpoint`.  kind "pending": the host
    waits for (token, code, body) to appear via rest_ready.
    """

    kind: str
    code: int = 0
    body: dict | None = None
    endpoint: str = ""
    token: object = None
    messages: Addressed = field(default_factory=list)


def _json(code: int, body: dict) -> RestResult:
    return RestResult("json", code=code, body=body)


_STATUS_HTTP = {Status.OK: 200, Status.BAD_REQUEST: 400,
                Status.CONFLICT: 409}


class ControllerNode:
    """One controller's complete state machine.

    All handlers take the node-local clock and return addressed messages
    to send.  Connection rebuild requests accumulate in `rebuilds` and
    finished REST mutations in `rest_ready`; the host drains both.
    """

    def __init__(self, node_id: int, fs: FileSystem,
                 controllers: dict[int, str], now: float,
                 tun: Tunables | None = None,
                 app_heartbeats: bool = True) -> None:
        self.node_id = node_id
        self.tun = tun if tun is not None else Tunables()
        self.controllers = dict(controllers)
        self.endpoint = controllers.get(node_id, "")
        self.started_at = now
        self.engine = StorageEngine(fs, self.tun)
        self.run_id = bump_run_id(fs)
        members = tuple(sorted(controllers))
        self.master = LeaseNode(node_id, self.run_id, members, int(now),
                                duration_ms=int(self.tun.master_lease_ms))
        self.rlog = ReplicatedLog(node_id, self.run_id, CONFIG_QUORUM,
                                  CONFIG_TRACK, self.engine, members,
                                  kind=QuorumKind.MAJORITY, tun=self.tun)
        self.rlog.on_executed = self._on_round

        self.config = ClusterConfig()
        self.applied_round = 0
        self._deferred_push = False
        snap = load_config_snapshot(fs)
        if snap is not None:
            self.applied_round = snap[0]
            self.config = ClusterConfig.decode(snap[1])
        self._advance_config()

        self.conn = ConnWatch(self.tun, enabled=app_heartbeats)
        for peer in members:
            if peer != node_id:
                self.conn.watch(peer, now)

        self.was_master = False
        self.master_ready = False
        self.no_new_primary_until = 0.0
        self.records: dict[int, HeartbeatRecord] = {}
        self.activations: dict[int, ActivationProcess] = {}
        self.grant_bound: dict[int, float] = {}
        self.pushed_grant: dict[int, int] = {}  # quorum -> primary pushed to
        self._synced_once = False
        self.inflight: dict[tuple, float] = {}
        self.client_peers: dict[int, float] = {}
        self.master_hint = 0
        self.snapshot_request_at = 0.0
        self.announce_at = 0.0

        # REST plumbing
        self.rest_tokens: dict[object, int] = {}  # token -> 1 (pending)
        self.rest_ready: list[tuple[object, int, dict]] = []
        self._rest_seq = 0
        self._truncates: dict[int, object] = {}  # request_id -> token
        self._truncate_seq = 0
        self._req_times: list[float] = []

        self.rebuilds: list[int] = []
        self.heartbeats_received = 0

    # -- small helpers ---------------------------------------------------

    def is_master(self, now: float) -> bool:
        return self.master.is_owner(int(now))

    def current_master(self, now: float) -> int:
        if self.is_master(now):
            return self.node_id
        return self.master_hint or self.master.owner_hint

    def _count_request(self, now: float) -> None:
        self._req_times.append(now)
        if len(self._req_times) > 4096:
            self._req_times = [t for t in self._req_times if t > now - 1000.0]

    def _replicate(self, cmd: Command, token: object,
                   now: float) -> Addressed:
        """Append one command as its own entry so commits map back to
        tokens positionally."""
        return self.rlog.append([cmd], token, now)

    def _cfg_key(self, cmd: Command) -> tuple:
        return (cmd.opcode, cmd.num, cmd.num2)

    def _monitor_replicate(self, cmd: Command, now: float) -> Addressed:
        """Replicate a monitor-originated command at most once until it
        commits; re-running the monitor with unchanged inputs is a no-op."""
        key = self._cfg_key(cmd)
        expiry = self.inflight.get(key)
        if expiry is not None and now < expiry:
            return []
        self.inflight[key] = now + 5 * self.tun.round_retry_ms
        return self._replicate(cmd, ("cfg", key), now)

    # -- config application ----------------------------------------------

    def _advance_config(self) -> list[tuple[Status, int]] | None:
        """Apply executed rounds the in-memory config has not seen yet.

        Returns the per-command results of the newest applied round, or
        None when the gap could not be closed from the local round log.
        """
        last = self.engine.ensure_track(CONFIG_TRACK).last_executed
        results: list[tuple[Status, int]] | None = None
        changed = False
        while self.applied_round < last:
            value = self.engine.round_value(CONFIG_TRACK,
                                            self.applied_round + 1)
            if value is None:
                return None  # trimmed away; a snapshot must bridge it
            self.applied_round += 1
            results = []
            for cmd in decode_commands(value):
                if cmd.opcode in CONFIG_OPCODES:
                    status, obj = apply_config_command(self.config, cmd)
                    if status is Status.OK:
                        changed = True
                        self.config.config_version = self.applied_round
                    self.inflight.pop(self._cfg_key(cmd), None)
                    results.append((status, obj))
                else:
                    results.append((Status.OK, 0))
        if changed:
            save_config_snapshot(self.engine.fs, self.applied_round,
                                 self.config.encode())
            self._deferred_push = True
        return results if results is not None else []

    def _push_config(self, now: float) -> Addressed:
        """Master pushes the new config to every server and known client."""
        if not self.is_master(now):
            return []
        blob = self.config.encode()
        out: Addressed = [(nid, ConfigPush(blob))
                          for nid in sorted(self.config.servers)]
        for cid in sorted(self.client_peers):
            out.append((cid, ClientConfig(0, self.node_id, blob)))
        return out

    def _on_round(self, paxos_id: int, outcomes: list[Outcome],
                  resolved: Resolved) -> None:
        results = self._advance_config()
        for i, (token, _outs) in enumerate(resolved):
            if isinstance(token, tuple) and token and token[0] == "rest":
                if results is None or i >= len(results):
                    status, obj = Status.NO_SERVICE, 0
                else:
                    status, obj = results[i]
                self._finish_rest(token, status, obj)
            elif token == "ready":
                self.master_ready = True

    def _finish_rest(self, token: object, status: Status, obj: int) -> None:
        if self.rest_tokens.pop(token, None) is None:
            return
        code = _STATUS_HTTP.get(status, 400)
        if status is Status.OK:
            body = {"status": "ok", "id": obj,
                    "config_version": self.config.config_version}
        else:
            body = {"status": "error", "error": status.name.lower()}
        self.rest_ready.append((token, code, body))

    # -- message handling ------------------------------------------------

    def on_message(self, now: float, src: int, msg: Message) -> Addressed:
        self.conn.saw(src, now)
        if isinstance(msg, Ping):
            return [(src, Pong(msg.nonce))]
        if isinstance(msg, (Pong, Hello)):
            return []
        if isinstance(msg, LEASE_MSGS):
            return self.master.on_message(int(now), src, msg) \
                + self._master_transition(now)
        if isinstance(msg, RLOG_MSGS):
            out = self.rlog.on_message(now, src, msg)
            out += self._drain_push(now)
            if any(isinstance(m, CatchupDbBegin) for _, m in out):
                # a state copy alone leaves the receiver's config torn;
                # ship the applied snapshot that matches it
                out.append((src, ConfigSnapshot(self.applied_round,
                                                self.config.encode())))
            return out
        if isinstance(msg, Heartbeat):
            return self._on_heartbeat(now, src, msg)
        if isinstance(msg, ActivationDone):
            return self._on_activation_done(now, src, msg)
        if isinstance(msg, ClientGetConfig):
            self._count_request(now)
            self.client_peers[src] = now
            return [(src, ClientConfig(msg.request_id,
                                       self.current_master(now),
                                       self.config.encode()))]
        if isinstance(msg, ConfigSnapshotRequest):
            if self.applied_round == 0:
                return []
            return [(src, ConfigSnapshot(self.applied_round,
                                         self.config.encode()))]
        if isinstance(msg, ConfigSnapshot):
            if msg.paxos_id > self.applied_round:
                self.applied_round = msg.paxos_id
                self.config = ClusterConfig.decode(msg.config)
                save_config_snapshot(self.engine.fs, self.applied_round,
                                     self.config.encode())
                self._advance_config()
            return []
        if isinstance(msg, MasterAnnounce):
            self.master_hint = msg.node_id
            if not self._synced_once:
                # first contact after boot: pull the config state in one
                # step instead of waiting for round traffic
                self._synced_once = True
                return [(src, ConfigSnapshotRequest())]
            return []
        if isinstance(msg, ClientWriteResult):
            return self._on_truncate_result(msg)
        log.debug("controller %d: ignoring %s from %d",
                  self.node_id, type(msg).__name__, src)
        return []

    def _drain_push(self, now: float) -> Addressed:
        if self._deferred_push:
            self._deferred_push = False
            return self._push_config(now)
        return []

    # -- heartbeats and the monitor --------------------------------------

    def _on_heartbeat(self, now: float, src: int, hb: Heartbeat) -> Addressed:
        self.heartbeats_received += 1
        self.conn.watch(src, now)
        if not self.is_master(now):
            return []
        record = HeartbeatRecord(hb.node_id, hb.endpoint, now,
                                 hb.send_time_ms)
        for rep in decode_track_reports(hb.tracks):
            record.tracks[rep.quorum_id] = rep
        self.records[hb.node_id] = record
        out: Addressed = []
        if self.master_ready:
            known = self.config.servers.get(hb.node_id)
            if known is None or known.endpoint != hb.endpoint:
                out += self._monitor_replicate(
                    Command(Opcode.CONFIG_REGISTER_SERVER, num=hb.node_id,
                            value=hb.endpoint.encode()), now)
        grants = []
        if self.master_ready:
            for qid in sorted(self.config.quorums):
                q = self.config.quorums[qid]
                if q.primary_node_id == hb.node_id \
                        and not self._primary_departing(now, qid,
                                                        hb.node_id):
                    dur = self.tun.primary_lease_ms
                    grants.append((qid, int(dur)))
                    bound = now + dur * self.tun.lease_acceptor_slack
                    self.grant_bound[qid] = max(
                        self.grant_bound.get(qid, 0.0), bound)
        out.append((src, HeartbeatAck(self.node_id, hb.send_time_ms,
                                      self.config.config_version,
                                      encode_grants(grants))))
        return out

    def _primary_departing(self, now: float, qid: int,
                           primary: int) -> bool:
        """True while this primary's deactivation, or a primary change for
        its quorum, is proposed but not yet committed.  A lease granted in
        that window could outlive the successor's election and overlap it,
        because the proposal-time lease bound cannot see later grants."""
        if self.inflight.get(
                (Opcode.CONFIG_DEACTIVATE, qid, primary), 0.0) > now:
            return True
        return any(key[0] == Opcode.CONFIG_SET_PRIMARY and key[1] == qid
                   and exp > now for key, exp in self.inflight.items())

    def _age(self, now: float, node_id: int) -> float:
        record = self.records.get(node_id)
        return now - record.received_at if record else float("inf")

    def _fresh(self, now: float, node_id: int) -> bool:
        return self._age(now, node_id) <= self.tun.heartbeat_timeout_ms

    def _pick_primary(self, now: float, q) -> int:
        """Freshest, most caught-up active member; 0 when none qualify."""
        best, best_key = 0, None
        for n in q.active_node_ids:
            if not self._fresh(now, n):
                continue
            rep = self.records[n].tracks.get(q.quorum_id)
            key = (rep.paxos_id if rep else 0, -n)
            if best_key is None or key > best_key:
                best, best_key = n, key
        return best

    def monitor_tick(self, now: float) -> Addressed:
        """The master's periodic duties; a no-op anywhere else."""
        if not (self.is_master(now) and self.master_ready):
            return []
        out: Addressed = []
        for qid in sorted(self.config.quorums):
            q = self.config.quorums[qid]
            actives = list(q.active_node_ids)
            planned_deacts = {key[1:] for key, exp in self.inflight.items()
                              if exp > now and
                              key[0] == Opcode.CONFIG_DEACTIVATE}
            remaining = [n for n in actives
                         if (qid, n) not in planned_deacts]
            for n in actives:
                if self._fresh(now, n) or (qid, n) in planned_deacts:
                    continue
                if len(remaining) <= 1:
                    break  # the last member keeps the quorum reachable
                out += self._monitor_replicate(
                    Command(Opcode.CONFIG_DEACTIVATE, num=qid, num2=n), now)
                remaining.remove(n)
            primary = q.primary_node_id
            if primary and (primary not in remaining
                            or not self._fresh(now, primary)):
                primary = 0  # deactivation in flight clears it at commit
            if primary == 0:
                cand = self._pick_primary(now, q)
                if cand and cand in remaining \
                        and now >= self.no_new_primary_until \
                        and now >= self.grant_bound.get(qid, 0.0):
                    out += self._monitor_replicate(
                        Command(Opcode.CONFIG_SET_PRIMARY, num=qid,
                                num2=cand), now)
            out += self._activation_tick(now, qid, q)
            out += self._shard_update_tick(now, qid, q)
        return out

    def _activation_tick(self, now: float, qid: int, q) -> Addressed:
        process = self.activations.get(qid)
        if process is not None:
            node_gone = not self._fresh(now, process.node_id) \
                or process.node_id not in q.inactive_node_ids
            primary = q.primary_node_id
            if node_gone or not primary or not self._fresh(now, primary):
                del self.activations[qid]
                return []
            if now - process.last_restart_sent >= self.tun.round_retry_ms:
                process.phase = ActivationPhase.RESTART_ROUND_SENT
                process.last_restart_sent = now
                return [(primary, ActivationRestart(qid, process.node_id))]
            return []
        primary = q.primary_node_id
        if not primary or not self._fresh(now, primary):
            return []
        primary_rep = self.records[primary].tracks.get(qid)
        if primary_rep is None:
            return []
        for n in sorted(q.inactive_node_ids):
            if not self._fresh(now, n):
                continue
            rep = self.records[n].tracks.get(qid)
            if rep is None:
                continue
            if rep.paxos_id + self.tun.activation_lag_rounds \
                    >= primary_rep.paxos_id:
                self.activations[qid] = ActivationProcess(
                    qid, n, ActivationPhase.CATCHING_UP)
                return self._activation_tick(now, qid, q)
        return []

    def _on_activation_done(self, now: float, src: int,
                            msg: ActivationDone) -> Addressed:
        if not (self.is_master(now) and self.master_ready):
            return []
        process = self.activations.get(msg.quorum_id)
        if process is None or process.node_id != msg.node_id:
            return []
        q = self.config.quorums.get(msg.quorum_id)
        if q is None or src != q.primary_node_id:
            return []
        del self.activations[msg.quorum_id]
        return self._monitor_replicate(
            Command(Opcode.CONFIG_ACTIVATE, num=msg.quorum_id,
                    num2=msg.node_id), now)

    def _shard_update_tick(self, now: float, qid: int, q) -> Addressed:
        primary = q.primary_node_id
        if not primary or not self._fresh(now, primary):
            return []
        rep = self.records[primary].tracks.get(qid)
        if rep is None or not rep.shards:
            return []
        reported = sorted(rep.shards, key=lambda s: s.shard_id)
        tables = {s.table_id for s in reported}
        have = sorted((s for s in self.config.shards.values()
                       if s.table_id in tables), key=lambda s: s.shard_id)
        if reported == have:
            return []
        return self._monitor_replicate(
            Command(Opcode.CONFIG_UPDATE_SHARDS, num=qid,
                    value=encode_shard_list(list(reported))), now)

    # -- master transitions ----------------------------------------------

    def _master_transition(self, now: float) -> Addressed:
        owner = self.is_master(now)
        if owner == self.was_master:
            return []
        self.was_master = owner
        out: Addressed = []
        if owner:
            log.info("controller %d: gained the master lease", self.node_id)
            self.records.clear()
            self.activations.clear()
            self.master_ready = False
            self.grant_bound.clear()
            # wait out every grant a previous master may have issued
            self.no_new_primary_until = now + \
                self.tun.primary_lease_ms * self.tun.lease_acceptor_slack + \
                GRANT_TRANSIT_GRACE_MS
            out += self.rlog.set_leader(True, now)
            # the first committed round proves this node's history is
            # complete; nothing is granted or commanded before then
            out += self._replicate(Command(Opcode.NOOP), "ready", now)
            out += [(peer, MasterAnnounce(self.node_id,
                                          int(self.tun.master_lease_ms)))
                    for peer in sorted(self.controllers)
                    if peer != self.node_id]
        else:
            log.info("controller %d: lost the master lease", self.node_id)
            self.records.clear()
            self.activations.clear()
            self.master_ready = False
            self.inflight.clear()
            out += self.rlog.set_leader(False, now)
        return out

    def tick(self, now: float) -> Addressed:
        out = self.master.tick(int(now))
        out += self._master_transition(now)
        out += self.rlog.tick(now)
        out += self._drain_push(now)
        # a config torn by a state copy heals from any peer's snapshot
        if self.applied_round \
                < self.engine.ensure_track(CONFIG_TRACK).last_executed:
            if self._advance_config() is None \
                    and now >= self.snapshot_request_at:
                self.snapshot_request_at = now + self.tun.catchup_poll_ms
                target = self.current_master(now)
                if target and target != self.node_id:
                    out.append((target, ConfigSnapshotRequest()))
        out += self.monitor_tick(now)
        out += self._grant_push(now)
        if self.is_master(now) and now >= self.announce_at:
            self.announce_at = now + self.tun.heartbeat_interval_ms
            out += [(peer, MasterAnnounce(self.node_id,
                                          int(self.tun.master_lease_ms)))
                    for peer in sorted(self.controllers)
                    if peer != self.node_id]
        pings, rebuilds = self.conn.tick(now)
        out += [(peer, Ping(int(now) & 0xFFFFFFFF)) for peer in pings]
        self.rebuilds.extend(rebuilds)
        return out

    def _grant_push(self, now: float) -> Addressed:
        """Push a lease once to a freshly committed primary so it can
        serve before its next heartbeat ack; renewals ride the acks."""
        if not (self.is_master(now) and self.master_ready):
            return []
        out: Addressed = []
        for qid in sorted(self.config.quorums):
            n = self.config.quorums[qid].primary_node_id
            if not n:
                self.pushed_grant.pop(qid, None)
                continue
            if self.pushed_grant.get(qid) == n \
                    or self._primary_departing(now, qid, n):
                continue
            self.pushed_grant[qid] = n
            dur = self.tun.primary_lease_ms
            bound = now + dur * self.tun.lease_acceptor_slack \
                + GRANT_TRANSIT_GRACE_MS
            self.grant_bound[qid] = max(self.grant_bound.get(qid, 0.0),
                                        bound)
            out.append((n, PrimaryGrant(qid, int(dur))))
        return out

    # -- REST API --------------------------------------------------------

    def handle_http(self, now: float, method: str, path: str,
                    body: bytes) -> RestResult:
        self._count_request(now)
        parts = [p for p in path.split("/") if p]
        try:
            if method == "GET" and parts == ["status"]:
                return _json(200, self.status_report(now))
            if method == "GET" and parts == ["metrics"]:
                return _json(200, self.metrics(now))
            return self._handle_mutation(now, method, parts, body)
        except (ValueError, KeyError, json.JSONDecodeError):
            return _json(400, {"status": "error", "error": "bad request"})

    def _handle_mutation(self, now: float, method: str, parts: list[str],
                         body: bytes) -> RestResult:
        master = self.current_master(now)
        if not self.is_master(now):
            endpoint = self.controllers.get(master, "")
            if master and endpoint:
                return RestResult("forward", endpoint=endpoint)
            return _json(503, {"status": "error", "error": "no master"})
        if not self.master_ready:
            return _json(503, {"status": "error", "error": "no master"})
        payload = json.loads(body) if body else {}
        if parts[:1] == ["tables"] and parts[2:] == ["truncate"]:
            return self._begin_truncate(now, int(parts[1]))
        if parts[:1] == ["quorums"] and len(parts) == 4 \
                and parts[2] == "activate":
            return self._manual_activate(now, int(parts[1]), int(parts[3]))
        cmd = self._mutation_command(method, parts, payload)
        if cmd is None:
            return _json(400, {"status": "error", "error": "bad request"})
        # a dry run against a copy reports obvious mistakes immediately
        status, _ = apply_config_command(self.config.clone(), cmd)
        if status is not Status.OK:
            return _json(_STATUS_HTTP.get(status, 400),
                         {"status": "error", "error": status.name.lower()})
        self._rest_seq += 1
        token = ("rest", self.node_id, self._rest_seq)
        self.rest_tokens[token] = 1
        messages = self._replicate(cmd, token, now)
        return RestResult("pending", token=token, messages=messages)

    def _mutation_command(self, method: str, parts: list[str],
                          payload: dict) -> Command | None:
        if method == "POST":
            if parts == ["databases"]:
                return Command(Opcode.CONFIG_CREATE_DATABASE,
                               value=str(payload["name"]).encode())
            if parts == ["tables"]:
                return Command(Opcode.CONFIG_CREATE_TABLE,
                               num=int(payload["database_id"]),
                               num2=int(payload["quorum_id"]),
                               value=str(payload["name"]).encode())
            if parts == ["quorums"]:
                ids = [int(n) for n in payload["node_ids"]]
                return Command(Opcode.CONFIG_CREATE_QUORUM,
                               value=encode_node_ids(ids))
            if len(parts) == 3 and parts[0] == "quorums" \
                    and parts[2] == "nodes":
                return Command(Opcode.CONFIG_ADD_NODE, num=int(parts[1]),
                               num2=int(payload["node_id"]))
            if len(parts) == 3 and parts[0] == "tables" \
                    and parts[2] == "rename":
                return Command(Opcode.CONFIG_RENAME_TABLE, num=int(parts[1]),
                               value=str(payload["name"]).encode())
        if method == "DELETE":
            if len(parts) == 2 and parts[0] == "databases":
                return Command(Opcode.CONFIG_DELETE_DATABASE,
                               num=int(parts[1]))
            if len(parts) == 2 and parts[0] == "tables":
                return Command(Opcode.CONFIG_DELETE_TABLE, num=int(parts[1]))
            if len(parts) == 2 and parts[0] == "quorums":
                return Command(Opcode.CONFIG_DELETE_QUORUM, num=int(parts[1]))
            if len(parts) == 4 and parts[0] == "quorums" \
                    and parts[2] == "nodes":
                return Command(Opcode.CONFIG_REMOVE_NODE, num=int(parts[1]),
                               num2=int(parts[3]))
        return None

    def _manual_activate(self, now: float, qid: int, node_id: int) -> RestResult:
        q = self.config.quorums.get(qid)
        if q is None:
            return _json(400, {"status": "error", "error": "bad request"})
        if node_id in q.active_node_ids:
            return _json(409, {"status": "error",
                               "error": "node already active"})
        if node_id not in q.inactive_node_ids:
            return _json(400, {"status": "error", "error": "bad request"})
        # reactivation completes through the normal monitor process once
        # the node reports within the activation window
        return _json(200, {"status": "pending", "quorum_id": qid,
                           "node_id": node_id})

    def _begin_truncate(self, now: float, table_id: int) -> RestResult:
        table = self.config.tables.get(table_id)
        if table is None:
            return _json(400, {"status": "error", "error": "bad request"})
        q = self.config.quorums.get(table.quorum_id)
        if q is None or not q.primary_node_id:
            return _json(503, {"status": "error", "error": "no primary"})
        self._rest_seq += 1
        token = ("rest", self.node_id, self._rest_seq)
        self.rest_tokens[token] = 1
        self._truncate_seq += 1
        rid = self._truncate_seq
        self._truncates[rid] = token
        cmd = Command(Opcode.TRUNCATE, table_id=table_id,
                      client_id=CONTROLLER_CLIENT_BIT | self.node_id,
                      request_id=rid)
        msg = ClientWrite(rid, CONTROLLER_CLIENT_BIT | self.node_id,
                          table.quorum_id, encode_commands([cmd]))
        return RestResult("pending", token=token,
                          messages=[(q.primary_node_id, msg)])

    def _on_truncate_result(self, msg: ClientWriteResult) -> Addressed:
        token = self._truncates.pop(msg.request_id, None)
        if token is None:
            return []
        status = Status(msg.status)
        if self.rest_tokens.pop(token, None) is not None:
            if status is Status.OK:
                self.rest_ready.append((token, 200, {
                    "status": "ok",
                    "config_version": self.config.config_version}))
            else:
                self.rest_ready.append((token, 409, {
                    "status": "error", "error": status.name.lower()}))
        return []

    # -- status and metrics ----------------------------------------------

    def status_report(self, now: float) -> dict:
        def keystr(b: bytes) -> str:
            return b.decode("utf-8", "backslashreplace")

        cfg = self.config
        quorums = []
        for qid in sorted(cfg.quorums):
            q = cfg.quorums[qid]
            paxos_ids = {}
            ages = {}
            for n in q.member_ids():
                record = self.records.get(n)
                if record is not None:
                    ages[str(n)] = int(now - record.received_at)
                    rep = record.tracks.get(qid)
                    if rep is not None:
                        paxos_ids[str(n)] = rep.paxos_id
            quorums.append({"id": qid, "active": sorted(q.active_node_ids),
                            "inactive": sorted(q.inactive_node_ids),
                            "primary": q.primary_node_id,
                            "paxos_ids": paxos_ids,
                            "heartbeat_age_ms": ages})
        return {
            "node_id": self.node_id,
            "is_master": self.is_master(now),
            "master_node_id": self.current_master(now),
            "config_version": cfg.config_version,
            "databases": [{"id": d.database_id, "name": d.name}
                          for d in sorted(cfg.databases.values(),
                                          key=lambda d: d.database_id)],
            "tables": [{"id": t.table_id, "database_id": t.database_id,
                        "quorum_id": t.quorum_id, "name": t.name}
                       for t in sorted(cfg.tables.values(),
                                       key=lambda t: t.table_id)],
            "quorums": quorums,
            "servers": [{"id": s.node_id, "endpoint": s.endpoint,
                         "heartbeat_age_ms":
                             int(a) if (a := self._age(now, s.node_id))
                             != float("inf") else None}
                        for s in sorted(cfg.servers.values(),
                                        key=lambda s: s.node_id)],
            "shards": [{"id": s.shard_id, "table_id": s.table_id,
                        "first_key": keystr(s.first_key),
                        "last_key": keystr(s.last_key),
                        "split_result": s.is_split_result}
                       for s in sorted(cfg.shards.values(),
                                       key=lambda s: s.shard_id)],
        }

    def metrics(self, now: float) -> dict:
        recent = sum(1 for t in self._req_times if t > now - 1000.0)
        return {
            "uptime_ms": int(now - self.started_at),
            "is_master": int(self.is_master(now)),
            "config_version": self.config.config_version,
            "rounds_executed": self.engine.stats.rounds_executed,
            "heartbeats_received": self.heartbeats_received,
            "servers_registered": len(self.config.servers),
            "quorums": len(self.config.quorums),
            "tables": len(self.config.tables),
            "requests_per_second": recent,
        }
