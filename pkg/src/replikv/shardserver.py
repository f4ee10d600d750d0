"""Shard server: replicated data quorums behind primary leases.

A shard server joins the quorums the cluster config assigns it.  Each
quorum replicates one storage track with unanimous rounds over the
active members, so any single surviving member is enough to recover the
data.  The controller master appoints one member as primary and keeps
its lease alive through heartbeat acks; only the leased primary serves
reads, accepts writes, hands out row locks, and proposes rounds.

Locks and transactions are volatile primary-side state: a lock is a
lease on one key, a transaction buffers client writes until commit puts
them — plus a terminating marker — into a single replicated round.
Losing the primary lease clears all of it; clients recover through the
replicated uniqueness of (client, request) outcomes, never through lock
state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .codec import CodecError
from .config import Tunables
from .conn import ConnWatch
from .messages import (ActivationDone, ActivationRestart, CatchupDbBegin,
                       CatchupDbChunk, CatchupDbEnd, CatchupDbRequired,
                       CatchupRequest, CatchupRound, ClientGet,
                       ClientGetResult, ClientList, ClientListResult,
                       ClientLock, ClientLockResult, ClientTxBegin,
                       ClientTxBeginResult, ClientTxCommit, ClientTxRollback,
                       ClientWrite, ClientWriteResult, ConfigPush,
                       ConfigSnapshot, ConfigSnapshotRequest, Heartbeat,
                       HeartbeatAck, Hello, MasterAnnounce, Message,
                       PaxosLearnProposal, PaxosLearnValue, PaxosPrepare,
                       PaxosPrepareGrant, PaxosPrepareReject, PaxosPropose,
                       PaxosProposeAccept, PaxosProposeReject,
                       PaxosRequestValue, PaxosRoundDecided, Ping, Pong,
                       PrimaryGrant, decode_grants, encode_outcomes,
                       encode_pairs)
from .paxos import QuorumKind, QuorumPolicy
from .rlog import Addressed, ReplicatedLog, Resolved
from .storage.engine import Outcome, StorageEngine
from .storage.fs import FileSystem
from .storage.statefiles import (bump_run_id, load_config_snapshot,
                                 save_config_snapshot)
from .types import (ClusterConfig, Command, Opcode, QuorumMeta, Status,
                    TrackReport, WRITE_OPCODES, decode_commands,
                    encode_track_reports)

log = logging.getLogger("replikv.shardserver")

RLOG_MSGS = (PaxosPrepare, PaxosPrepareGrant, PaxosPrepareReject,
             PaxosPropose, PaxosProposeAccept, PaxosProposeReject,
             PaxosLearnValue, PaxosLearnProposal, PaxosRequestValue,
             PaxosRoundDecided, CatchupRequest, CatchupRound,
             CatchupDbRequired, CatchupDbBegin, CatchupDbChunk, CatchupDbEnd)

# how long a guard against re-proposing the same command stays up while
# the round it rode in works its way to execution
INFLIGHT_GUARD_MS = 2500.0

# policy widened for a joining node reverts if the master stops asking
ACTIVATION_EXTRA_TTL_MS = 2500.0


@dataclass
class LockEntry:
    client_id: int
    txid: int
    expiry: float


@dataclass
class TxState:
    txid: int
    client_id: int
    expiry: float
    locks: set[tuple[int, bytes]] = field(default_factory=set)


@dataclass
class BlockedWrite:
    src: int
    msg: ClientWrite
    deadline: float


class ShardServer:
    """One shard server's complete state machine.

    All handlers take the node-local clock and return addressed
    messages; connection rebuild requests accumulate in `rebuilds`.
    """

    def __init__(self, node_id: int, fs: FileSystem,
                 controllers: dict[int, str], endpoint: str, now: float,
                 tun: Tunables | None = None,
                 app_heartbeats: bool = True) -> None:
        self.node_id = node_id
        self.endpoint = endpoint
        self.tun = tun if tun is not None else Tunables()
        self.controllers = dict(controllers)
        self.engine = StorageEngine(fs, self.tun)
        self.run_id = bump_run_id(fs)

        self.config = ClusterConfig()
        snap = load_config_snapshot(fs)
        if snap is not None:
            self.config = ClusterConfig.decode(snap[1])

        self.rlogs: dict[int, ReplicatedLog] = {}
        self.primary_expiry: dict[int, float] = {}
        self.leading: set[int] = set()
        self.locks: dict[int, dict[tuple[int, bytes], LockEntry]] = {}
        self.txs: dict[int, dict[int, TxState]] = {}
        self.blocked: dict[int, list[BlockedWrite]] = {}
        self.master_hint = 0
        self.heartbeat_at = 0.0
        self.catchup_at: dict[int, float] = {}
        self.config_pull_at = 0.0
        self._tx_seq = 0
        self._inflight: dict[tuple, float] = {}
        self._activation_extra: dict[int, tuple[int, float]] = {}
        self._outbox: Addressed = []
        self.rebuilds: list[int] = []

        self.conn = ConnWatch(self.tun, enabled=app_heartbeats)
        for peer in sorted(controllers):
            self.conn.watch(peer, now)
        self._reconcile(now)

    # -- config adoption and reconciliation ------------------------------

    def _adopt_config(self, blob: bytes, now: float) -> None:
        cfg = ClusterConfig.decode(blob)
        if cfg.config_version <= self.config.config_version:
            return
        self.config = cfg
        save_config_snapshot(self.engine.fs, cfg.config_version, blob)
        self._reconcile(now)

    def _my_quorums(self) -> dict[int, QuorumMeta]:
        return {qid: q for qid, q in self.config.quorums.items()
                if self.node_id in q.member_ids()}

    def _policy_for(self, qid: int) -> QuorumPolicy:
        actives = set(self.config.quorums[qid].active_node_ids)
        extra = self._activation_extra.get(qid)
        if extra is not None:
            actives.add(extra[0])
        return QuorumPolicy(QuorumKind.TOTAL, tuple(sorted(actives)))

    def _reconcile(self, now: float) -> None:
        mine = self._my_quorums()
        for qid in sorted(mine):
            if qid in self.rlogs:
                continue
            rl = ReplicatedLog(self.node_id, self.run_id, qid, qid,
                               self.engine, self._policy_for(qid).members,
                               kind=QuorumKind.TOTAL, tun=self.tun)
            rl.on_executed = \
                lambda pid, outs, res, q=qid: self._on_round(q, pid, outs,
                                                             res)
            self.rlogs[qid] = rl
            self.locks.setdefault(qid, {})
            self.txs.setdefault(qid, {})
            self.blocked.setdefault(qid, [])
            for peer in self._policy_for(qid).members:
                if peer != self.node_id:
                    self.conn.watch(peer, now)
        for qid in sorted(set(self.rlogs) - set(mine)):
            # removed from the quorum: stop participating, keep the data
            self._lose_primary(qid, now)
            del self.rlogs[qid]
            self.locks.pop(qid, None)
            self.txs.pop(qid, None)
            self.blocked.pop(qid, None)
        for qid, rl in self.rlogs.items():
            extra = self._activation_extra.get(qid)
            if extra is not None \
                    and extra[0] in mine[qid].active_node_ids:
                del self._activation_extra[qid]  # activation committed
            policy = self._policy_for(qid)
            if rl.proposer.policy.members != policy.members:
                self._outbox += [(dst, m)
                                 for dst, m in rl.set_policy(policy, now)]

    def _table_reconcile(self, now: float) -> Addressed:
        """A primary aligns its engine's tables with the config."""
        out: Addressed = []
        for qid in sorted(self.leading):
            want: dict[int, int] = {}
            for t in self.config.tables.values():
                if t.quorum_id != qid:
                    continue
                shard_ids = [s.shard_id for s in self.config.shards.values()
                             if s.table_id == t.table_id]
                if shard_ids:
                    want[t.table_id] = min(shard_ids)
            have = {s.table_id for s in self.engine.shard_report(qid)}
            for table_id in sorted(set(want) - have):
                out += self._guarded_append(
                    qid, Command(Opcode.ADOPT_TABLE, num=table_id,
                                 num2=want[table_id]),
                    ("adopt", qid, table_id), now)
            for table_id in sorted(have - set(want)):
                out += self._guarded_append(
                    qid, Command(Opcode.DROP_TABLE, num=table_id),
                    ("drop", qid, table_id), now)
        return out

    def _guarded_append(self, qid: int, cmd: Command, key: tuple,
                        now: float) -> Addressed:
        expiry = self._inflight.get(key)
        if expiry is not None and now < expiry:
            return []
        self._inflight[key] = now + INFLIGHT_GUARD_MS
        return self.rlogs[qid].append([cmd], key, now)

    # -- primary lease ---------------------------------------------------

    def is_primary(self, qid: int, now: float) -> bool:
        return now < self.primary_expiry.get(qid, 0.0)

    def _lose_primary(self, qid: int, now: float) -> None:
        self.primary_expiry.pop(qid, None)
        if qid not in self.leading:
            return
        self.leading.discard(qid)
        if qid in self.rlogs:
            self._outbox += self.rlogs[qid].set_leader(False, now)
        self.locks.get(qid, {}).clear()
        self.txs.get(qid, {}).clear()
        for bw in self.blocked.get(qid, []):
            self._outbox.append((bw.src, self._write_reply(
                bw.msg, Status.NOT_PRIMARY, qid)))
        self.blocked[qid] = []
        log.info("server %d: primary lease for quorum %d gone",
                 self.node_id, qid)

    def _lease_tick(self, now: float) -> None:
        for qid in sorted(self.rlogs):
            leased = self.is_primary(qid, now)
            if leased and qid not in self.leading:
                self.leading.add(qid)
                self._outbox += self.rlogs[qid].set_leader(True, now)
                log.info("server %d: primary for quorum %d",
                         self.node_id, qid)
            elif not leased and qid in self.leading:
                self._lose_primary(qid, now)

    # -- message handling ------------------------------------------------

    def on_message(self, now: float, src: int, msg: Message) -> Addressed:
        self.conn.saw(src, now)
        out = self._dispatch(now, src, msg)
        return self._flush(out)

    def _flush(self, out: Addressed) -> Addressed:
        if self._outbox:
            out = self._outbox + out
            self._outbox = []
        return out

    def _dispatch(self, now: float, src: int, msg: Message) -> Addressed:
        if isinstance(msg, Ping):
            return [(src, Pong(msg.nonce))]
        if isinstance(msg, (Pong, Hello)):
            return []
        if isinstance(msg, RLOG_MSGS):
            rl = self.rlogs.get(msg.quorum_id)
            return rl.on_message(now, src, msg) if rl else []
        if isinstance(msg, HeartbeatAck):
            return self._on_ack(now, src, msg)
        if isinstance(msg, PrimaryGrant):
            q = self.config.quorums.get(msg.quorum_id)
            if q is not None and q.primary_node_id == self.node_id:
                self.primary_expiry[msg.quorum_id] = max(
                    self.primary_expiry.get(msg.quorum_id, 0.0),
                    now + msg.duration_ms)
                self._lease_tick(now)
            return []
        if isinstance(msg, ConfigPush):
            self._adopt_config(msg.config, now)
            return []
        if isinstance(msg, ConfigSnapshot):
            self._adopt_config(msg.config, now)
            return []
        if isinstance(msg, MasterAnnounce):
            self.master_hint = msg.node_id
            return []
        if isinstance(msg, ActivationRestart):
            return self._on_activation_restart(now, src, msg)
        if isinstance(msg, ClientWrite):
            return self._on_write(now, src, msg)
        if isinstance(msg, ClientGet):
            return self._on_get(now, src, msg)
        if isinstance(msg, ClientList):
            return self._on_list(now, src, msg)
        if isinstance(msg, ClientTxBegin):
            return self._on_tx_begin(now, src, msg)
        if isinstance(msg, ClientLock):
            return self._on_lock(now, src, msg)
        if isinstance(msg, ClientTxCommit):
            return self._on_tx_commit(now, src, msg)
        if isinstance(msg, ClientTxRollback):
            self._release_tx(msg.quorum_id, msg.txid)
            return []
        log.debug("server %d: ignoring %s from %d", self.node_id,
                  type(msg).__name__, src)
        return []

    def _on_ack(self, now: float, src: int, ack: HeartbeatAck) -> Addressed:
        self.master_hint = ack.master_node_id
        for qid, duration_ms in decode_grants(ack.grants):
            # anchored to our own clock at the echoed send time, so the
            # expiry is conservative no matter how long the ack traveled
            self.primary_expiry[qid] = max(
                self.primary_expiry.get(qid, 0.0),
                ack.echo_send_time_ms + duration_ms)
        self._lease_tick(now)
        out: Addressed = []
        if ack.config_version > self.config.config_version \
                and now >= self.config_pull_at:
            self.config_pull_at = now + self.tun.catchup_poll_ms
            out.append((src, ConfigSnapshotRequest()))
        return out

    # -- client operations -----------------------------------------------

    def _primary_hint(self, qid: int) -> int:
        q = self.config.quorums.get(qid)
        return q.primary_node_id if q is not None else 0

    def _write_reply(self, msg: ClientWrite, status: Status, qid: int,
                     outcomes: bytes = b"") -> ClientWriteResult:
        return ClientWriteResult(msg.request_id, int(status), outcomes,
                                 self._primary_hint(qid),
                                 self.config.config_version)

    def _quorum_for_table(self, table_id: int) -> int | None:
        t = self.config.tables.get(table_id)
        return t.quorum_id if t is not None else None

    def _validate_writes(self, qid: int,
                         commands: list[Command]) -> Status | None:
        for cmd in commands:
            if cmd.opcode not in WRITE_OPCODES \
                    or cmd.opcode is Opcode.TX_COMMIT:
                return Status.BAD_REQUEST
            if self._quorum_for_table(cmd.table_id) != qid:
                return Status.UNKNOWN_TABLE
            if len(cmd.key) > self.tun.max_key_size \
                    or len(cmd.value) > self.tun.max_value_size:
                return Status.BAD_REQUEST
        return None

    def _lock_conflict(self, qid: int, commands: list[Command],
                       now: float, txid: int = 0) -> bool:
        table = self.locks.get(qid, {})
        for cmd in commands:
            entry = table.get((cmd.table_id, cmd.key))
            if entry is not None and now < entry.expiry \
                    and entry.txid != txid:
                return True
        return False

    def _on_write(self, now: float, src: int, msg: ClientWrite,
                  queued: bool = False) -> Addressed:
        qid = msg.quorum_id
        if not self.is_primary(qid, now):
            return [(src, self._write_reply(msg, Status.NOT_PRIMARY, qid))]
        try:
            commands = decode_commands(msg.commands)
        except (CodecError, ValueError):
            return [(src, self._write_reply(msg, Status.BAD_REQUEST, qid))]
        bad = self._validate_writes(qid, commands)
        if bad is not None:
            return [(src, self._write_reply(msg, bad, qid))]
        replays = [self.engine.cached_outcomes(qid, c.client_id,
                                               c.request_id)
                   for c in commands]
        if all(r is not None for r in replays):
            outs = [outcome for r in replays for outcome in r]
            return [(src, self._write_reply(msg, Status.OK, qid,
                                            encode_outcomes(outs)))]
        if self._lock_conflict(qid, commands, now):
            if not queued:
                self.blocked[qid].append(BlockedWrite(
                    src, msg, now + self.tun.lock_wait_ms))
            return []
        return self.rlogs[qid].append(commands, ("write", src,
                                                 msg.request_id), now)

    def _on_get(self, now: float, src: int, msg: ClientGet) -> Addressed:
        qid = self._quorum_for_table(msg.table_id)
        if qid is None:
            return [(src, ClientGetResult(msg.request_id,
                                          int(Status.UNKNOWN_TABLE), b"", 0,
                                          self.config.config_version))]
        if not self.is_primary(qid, now):
            return [(src, ClientGetResult(msg.request_id,
                                          int(Status.NOT_PRIMARY), b"",
                                          self._primary_hint(qid),
                                          self.config.config_version))]
        status, value = self.engine.get(qid, msg.table_id, msg.key)
        return [(src, ClientGetResult(msg.request_id, int(status), value,
                                      self.node_id,
                                      self.config.config_version))]

    def _on_list(self, now: float, src: int, msg: ClientList) -> Addressed:
        qid = self._quorum_for_table(msg.table_id)
        if qid is None:
            return [(src, ClientListResult(msg.request_id,
                                           int(Status.UNKNOWN_TABLE), b"", 0,
                                           0, self.config.config_version))]
        if not self.is_primary(qid, now):
            return [(src, ClientListResult(msg.request_id,
                                           int(Status.NOT_PRIMARY), b"", 0,
                                           self._primary_hint(qid),
                                           self.config.config_version))]
        status, items, total = self.engine.list_range(
            qid, msg.table_id, msg.start, msg.end, msg.prefix, msg.count,
            reverse=msg.direction == 1, count_only=msg.count_only == 1)
        return [(src, ClientListResult(msg.request_id, int(status),
                                       encode_pairs(items), total,
                                       self.node_id,
                                       self.config.config_version))]

    # -- transactions ----------------------------------------------------

    def _on_tx_begin(self, now: float, src: int,
                     msg: ClientTxBegin) -> Addressed:
        qid = msg.quorum_id
        if not self.is_primary(qid, now):
            return [(src, ClientTxBeginResult(msg.request_id,
                                              int(Status.NOT_PRIMARY), 0,
                                              self._primary_hint(qid),
                                              self.config.config_version))]
        self._tx_seq += 1
        txid = (self.node_id << 32) | self._tx_seq
        self.txs[qid][txid] = TxState(txid, msg.client_id,
                                      now + self.tun.lock_lease_ms)
        return [(src, ClientTxBeginResult(msg.request_id, int(Status.OK),
                                          txid, self.node_id,
                                          self.config.config_version))]

    def _on_lock(self, now: float, src: int, msg: ClientLock) -> Addressed:
        def reply(status: Status) -> Addressed:
            qid = self._quorum_for_table(msg.table_id) or 0
            return [(src, ClientLockResult(msg.request_id, int(status),
                                           self._primary_hint(qid),
                                           self.config.config_version))]

        qid = self._quorum_for_table(msg.table_id)
        if qid is None:
            return reply(Status.UNKNOWN_TABLE)
        if not self.is_primary(qid, now):
            return reply(Status.NOT_PRIMARY)
        tx = self.txs[qid].get(msg.txid)
        if tx is None or tx.client_id != msg.client_id or now > tx.expiry:
            return reply(Status.TRANSACTION_EXPIRED)
        key = (msg.table_id, msg.key)
        entry = self.locks[qid].get(key)
        if entry is not None and now < entry.expiry \
                and entry.txid != msg.txid:
            # no waiting between transactions: the second locker loses
            # immediately, which rules out deadlock by construction
            return reply(Status.LOCK_HELD)
        self.locks[qid][key] = LockEntry(msg.client_id, msg.txid,
                                         now + self.tun.lock_lease_ms)
        tx.locks.add(key)
        tx.expiry = now + self.tun.lock_lease_ms
        return reply(Status.OK)

    def _on_tx_commit(self, now: float, src: int,
                      msg: ClientTxCommit) -> Addressed:
        qid = msg.quorum_id
        def reply(status: Status, outcomes: bytes = b"") -> Addressed:
            return [(src, ClientWriteResult(msg.request_id, int(status),
                                            outcomes,
                                            self._primary_hint(qid),
                                            self.config.config_version))]

        if not self.is_primary(qid, now):
            return reply(Status.NOT_PRIMARY)
        cached = self.engine.cached_outcomes(qid, msg.client_id,
                                             msg.request_id)
        if cached is not None:
            return reply(Status.OK)  # a retry of a commit that landed
        tx = self.txs[qid].get(msg.txid)
        if tx is None or tx.client_id != msg.client_id:
            return reply(Status.TRANSACTION_EXPIRED)
        if any(self.locks[qid].get(key) is None
               or now >= self.locks[qid][key].expiry
               or self.locks[qid][key].txid != msg.txid
               for key in tx.locks):
            # some lock lapsed: nothing from this transaction may land
            self._release_tx(qid, msg.txid)
            return reply(Status.TRANSACTION_EXPIRED)
        try:
            commands = decode_commands(msg.commands)
        except (CodecError, ValueError):
            return reply(Status.BAD_REQUEST)
        bad = self._validate_writes(qid, commands)
        if bad is not None:
            return reply(bad)
        if self._lock_conflict(qid, commands, now, txid=msg.txid):
            self._release_tx(qid, msg.txid)
            return reply(Status.TRANSACTION_EXPIRED)
        marker = Command(Opcode.TX_COMMIT, num=msg.txid,
                         client_id=msg.client_id, request_id=msg.request_id)
        return self.rlogs[qid].append(commands + [marker],
                                      ("commit", src, msg.request_id, qid,
                                       msg.txid), now)

    def _release_tx(self, qid: int, txid: int) -> None:
        tx = self.txs.get(qid, {}).pop(txid, None)
        if tx is None:
            return
        table = self.locks.get(qid, {})
        for key in tx.locks:
            entry = table.get(key)
            if entry is not None and entry.txid == txid:
                del table[key]

    # -- activation ------------------------------------------------------

    def _on_activation_restart(self, now: float, src: int,
                               msg: ActivationRestart) -> Addressed:
        qid = msg.quorum_id
        if src != self.master_hint or qid not in self.rlogs \
                or not self.is_primary(qid, now):
            return []
        self._activation_extra[qid] = (msg.node_id, now)
        rl = self.rlogs[qid]
        out = rl.set_policy(self._policy_for(qid), now)
        rl.must_prepare = True  # the joining node must see a full round
        if not rl.round_in_flight:
            out += self._guarded_append(qid, Command(Opcode.NOOP),
                                        ("activation", qid, msg.node_id),
                                        now)
        return out

    # -- round completion ------------------------------------------------

    def _on_round(self, qid: int, paxos_id: int, outcomes: list[Outcome],
                  resolved: Resolved) -> None:
        for token, outs in resolved:
            kind = token[0] if isinstance(token, tuple) and token else ""
            if kind == "write":
                _, src, rid = token
                self._outbox.append((src, ClientWriteResult(
                    rid, int(Status.OK), encode_outcomes(outs),
                    self.node_id, self.config.config_version)))
            elif kind == "commit":
                _, src, rid, q, txid = token
                self._release_tx(q, txid)
                self._outbox.append((src, ClientWriteResult(
                    rid, int(Status.OK), encode_outcomes(outs[:-1]),
                    self.node_id, self.config.config_version)))
            if isinstance(token, tuple):
                self._inflight.pop(token, None)
        extra = self._activation_extra.get(qid)
        if extra is not None:
            rl = self.rlogs[qid]
            if extra[0] in rl.last_round_accepts:
                self._outbox.append((self.master_hint, ActivationDone(
                    qid, extra[0], paxos_id)))

    # -- periodic work ---------------------------------------------------

    def tick(self, now: float) -> Addressed:
        out: Addressed = []
        self._lease_tick(now)
        for qid in sorted(self.rlogs):
            out += self.rlogs[qid].tick(now)
        out += self._retry_blocked(now)
        self._reap(now)
        out += self._activation_expiry(now)
        if now >= self.heartbeat_at:
            self.heartbeat_at = now + self.tun.heartbeat_interval_ms
            out += self._send_heartbeats(now)
        out += self._catchup_poll(now)
        if self.leading:
            out += self._table_reconcile(now)
            out += self._split_tick(now)
        pings, rebuilds = self.conn.tick(now)
        out += [(peer, Ping(int(now) & 0xFFFFFFFF)) for peer in pings]
        self.rebuilds.extend(rebuilds)
        return self._flush(out)

    def _send_heartbeats(self, now: float) -> Addressed:
        reports = [TrackReport(qid,
                               self.engine.ensure_track(qid).last_executed,
                               tuple(sorted(self.engine.shard_report(qid),
                                            key=lambda s: s.shard_id)))
                   for qid in sorted(self.rlogs)]
        hb = Heartbeat(self.node_id, self.endpoint, int(now),
                       encode_track_reports(reports))
        return [(peer, hb) for peer in sorted(self.controllers)]

    def _catchup_poll(self, now: float) -> Addressed:
        """An inactive member pulls rounds from the primary: nobody
        replicates to it, so catching up is its own job."""
        out: Addressed = []
        for qid, q in sorted(self._my_quorums().items()):
            if self.node_id in q.active_node_ids:
                continue
            primary = q.primary_node_id
            if not primary or primary == self.node_id:
                continue
            if now < self.catchup_at.get(qid, 0.0):
                continue
            self.catchup_at[qid] = now + self.tun.catchup_poll_ms
            rl = self.rlogs.get(qid)
            if rl is not None and rl.install is None:
                out.append((primary, CatchupRequest(qid, rl.next_round())))
        return out

    def _retry_blocked(self, now: float) -> Addressed:
        out: Addressed = []
        for qid in sorted(self.blocked):
            still: list[BlockedWrite] = []
            for bw in self.blocked[qid]:
                if not self.is_primary(qid, now):
                    out.append((bw.src, self._write_reply(
                        bw.msg, Status.NOT_PRIMARY, qid)))
                    continue
                commands = decode_commands(bw.msg.commands)
                if not self._lock_conflict(qid, commands, now):
                    out += self._on_write(now, bw.src, bw.msg, queued=True)
                elif now >= bw.deadline:
                    out.append((bw.src, self._write_reply(
                        bw.msg, Status.LOCKED, qid)))
                else:
                    still.append(bw)
            self.blocked[qid] = still
        return out

    def _reap(self, now: float) -> None:
        for qid in sorted(self.txs):
            for txid, tx in list(self.txs[qid].items()):
                if now > tx.expiry:
                    self._release_tx(qid, txid)
        for qid in sorted(self.locks):
            table = self.locks[qid]
            for key in [k for k, e in table.items() if now >= e.expiry]:
                del table[key]

    def _activation_expiry(self, now: float) -> Addressed:
        out: Addressed = []
        for qid in list(self._activation_extra):
            node, seen = self._activation_extra[qid]
            if now - seen > ACTIVATION_EXTRA_TTL_MS:
                del self._activation_extra[qid]
                if qid in self.rlogs:
                    out += self.rlogs[qid].set_policy(
                        self._policy_for(qid), now)
        return out

    def _split_tick(self, now: float) -> Addressed:
        out: Addressed = []
        for qid in sorted(self.leading):
            found = self.engine.compute_split(qid)
            if found is None:
                continue
            shard_id, split_key = found
            out += self._guarded_append(
                qid, Command(Opcode.SPLIT_SHARD, num=shard_id,
                             key=split_key),
                ("split", qid, shard_id), now)
        return out
