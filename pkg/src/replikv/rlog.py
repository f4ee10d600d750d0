"""Replicated command log: strictly sequential Paxos rounds over a track.

One instance drives one quorum's history on one node.  The leader packs
queued commands into round values; every learned round is executed
against the storage track in order.  Durability is chained: executing a
round leaves its redo record unsynced, and the sync happens together
with the acceptor-record write of the next round's prepare or propose —
so a reply never leaves before everything it implies is on disk, and a
crashed node restarts at most one round behind and catches up.

Rounds far behind us are answered with the decided value; rounds ahead
of us trigger rate-limited catchup from the leader, first replaying
retained log rounds, and falling back to a full state copy when the
needed rounds have been trimmed.
"""

from __future__ import annotations

import logging
from collections import deque
from typing import Callable

from .config import Tunables
from .messages import (CatchupDbBegin, CatchupDbChunk, CatchupDbEnd,
                       CatchupDbRequired, CatchupRequest, CatchupRound,
                       Message, PaxosLearnProposal, PaxosLearnValue,
                       PaxosPrepare, PaxosPrepareGrant, PaxosPrepareReject,
                       PaxosPropose, PaxosProposeAccept, PaxosProposeReject,
                       PaxosRequestValue, PaxosRoundDecided)
from .paxos import Phase, Proposer, Acceptor, QuorumKind, QuorumPolicy
from .storage.engine import InstallSession, Outcome, StorageEngine
from .storage.statefiles import load_acceptor, save_acceptor
from .types import Command, encode_commands

log = logging.getLogger("replikv.rlog")

Addressed = list[tuple[int, Message]]
Resolved = list[tuple[object, list[Outcome]]]

CATCHUP_SLICE = 64 * 1024


class NotLeader(Exception):
    pass


class ReplicatedLog:
    """One (node, quorum) replication state machine."""

    def __init__(self, node_id: int, run_id: int, quorum_id: int,
                 track_id: int, engine: StorageEngine,
                 members: tuple[int, ...],
                 kind: QuorumKind = QuorumKind.MAJORITY,
                 tun: Tunables | None = None):
        self.node_id = node_id
        self.quorum_id = quorum_id
        self.track_id = track_id
        self.engine = engine
        self.tun = tun if tun is not None else Tunables()
        engine.ensure_track(track_id)
        policy = QuorumPolicy(kind, members)
        self.proposer = Proposer(node_id, run_id, quorum_id, policy)
        record = load_acceptor(engine.fs, track_id)
        if record is not None and record.paxos_id >= self.next_round():
            # a promise given for a round we haven't executed yet must
            # survive the restart
            self.acceptor = Acceptor(quorum_id, record)
        else:
            self.acceptor = Acceptor(quorum_id)
            self.acceptor.advance(self.next_round())
        self.is_leader = False
        # a full prepare round is required until we complete a round of
        # our own: on becoming leader, and again whenever a rival outbids
        # us — the zero fast path loses to any real promise
        self.must_prepare = True
        self.leader_hint = 0
        self.pending: deque[tuple[list[Command], int, object]] = deque()
        self.in_flight: list[tuple[list[Command], int, object]] | None = None
        self.in_flight_value = b""
        self.buffered: tuple[int, bytes] | None = None
        self.gap_target = 0   # highest round number seen in peer traffic
        self.catchup_at = 0.0
        self.install: InstallSession | None = None
        self.round_deadline = 0.0
        self._next_policy: QuorumPolicy | None = None
        self.last_round_accepts: frozenset[int] = frozenset()
        self.on_executed: Callable[[int, list[Outcome], Resolved],
                                   None] | None = None

    # -- observers -------------------------------------------------------

    def next_round(self) -> int:
        return self.engine.tracks[self.track_id].last_executed + 1

    @property
    def round_in_flight(self) -> bool:
        return self.proposer.phase in (Phase.PREPARING, Phase.PROPOSING)

    # -- leadership and appends ------------------------------------------

    def set_leader(self, leader: bool, now: float) -> Addressed:
        if leader and not self.is_leader:
            # a new leader's first round always runs the full protocol:
            # it must discover any value the old leader got accepted
            self.must_prepare = True
        self.is_leader = leader
        return self._maybe_start(now) if leader else []

    def set_policy(self, policy: QuorumPolicy,
                   now: float | None = None) -> Addressed:
        """Takes effect when the next round starts.  With a clock, a
        round already in flight restarts immediately under the new
        policy - without that, a round waiting on a member that was just
        removed would stall until the member came back."""
        self._next_policy = policy
        if now is None or not self.round_in_flight:
            return []
        self.proposer.policy = policy
        self._next_policy = None
        self.round_deadline = now + self.tun.round_retry_ms
        return self.proposer.restart()

    def append(self, commands: list[Command], token: object,
               now: float) -> Addressed:
        if not self.is_leader:
            raise NotLeader(f"quorum {self.quorum_id}: leader is "
                            f"{self.leader_hint or 'unknown'}")
        if not commands:
            raise ValueError("empty command batch")
        size = len(encode_commands(commands))
        if size > self.tun.max_round_value_size:
            raise ValueError(f"batch of {size} bytes exceeds round "
                             f"value limit {self.tun.max_round_value_size}")
        self.pending.append((commands, size, token))
        return self._maybe_start(now)

    def _maybe_start(self, now: float) -> Addressed:
        if not self.is_leader or self.proposer.phase is not Phase.IDLE \
                or self.install is not None:
            return []
        if self.in_flight is None:
            if not self.pending:
                return []
            batch: list[tuple[list[Command], int, object]] = []
            size = 0
            while self.pending:
                entry = self.pending[0]
                # merged batches share one count header, so summed entry
                # sizes bound the combined encoding from above
                if batch and size + entry[1] > self.tun.max_round_value_size:
                    break
                self.pending.popleft()
                batch.append(entry)
                size += entry[1]
            self.in_flight = batch
            self.in_flight_value = encode_commands(
                [c for commands, _, _ in batch for c in commands])
        if self._next_policy is not None:
            self.proposer.policy = self._next_policy
            self._next_policy = None
        out = self.proposer.start(self.next_round(), self.in_flight_value,
                                  fast_path=not self.must_prepare)
        self.round_deadline = now + self.tun.round_retry_ms
        return out

    # -- message handling ------------------------------------------------

    def on_message(self, now: float, src: int, msg: Message) -> Addressed:
        if isinstance(msg, (PaxosPrepare, PaxosPropose)):
            return self._on_acceptor_bound(now, src, msg)
        if isinstance(msg, PaxosPrepareGrant):
            return self.proposer.on_prepare_grant(src, msg)
        if isinstance(msg, PaxosPrepareReject):
            out = self.proposer.on_prepare_reject(src, msg)
            if self.proposer.phase is Phase.IDLE:
                self.must_prepare = True  # outbid: no more fast path
            return out
        if isinstance(msg, PaxosProposeAccept):
            out = self.proposer.on_propose_accept(src, msg)
            if self.proposer.phase is Phase.LEARNED:
                out = out + self._execute(self.proposer.paxos_id,
                                          self.proposer.decided(), now)
            return out
        if isinstance(msg, PaxosProposeReject):
            out = self.proposer.on_propose_reject(src, msg)
            if self.proposer.phase is Phase.IDLE:
                self.must_prepare = True
            return out
        if isinstance(msg, PaxosLearnValue):
            return self._on_learn_value(now, src, msg.paxos_id, msg.value)
        if isinstance(msg, PaxosLearnProposal):
            return self._on_learn_proposal(now, src, msg)
        if isinstance(msg, PaxosRequestValue):
            return self._decided_reply(src, msg.paxos_id)
        if isinstance(msg, PaxosRoundDecided):
            return self._on_round_decided(now, src, msg)
        if isinstance(msg, CatchupRequest):
            return self._serve_catchup(src, msg.from_paxos_id)
        if isinstance(msg, CatchupRound):
            return self._on_catchup_round(now, src, msg)
        if isinstance(msg, CatchupDbRequired):
            self.leader_hint = src
            return []
        if isinstance(msg, (CatchupDbBegin, CatchupDbChunk, CatchupDbEnd)):
            return self._on_install(now, src, msg)
        raise AssertionError(f"unrouted message {msg!r}")

    def _on_acceptor_bound(self, now: float, src: int, msg) -> Addressed:
        if msg.paxos_id == self.acceptor.record.paxos_id:
            if isinstance(msg, PaxosPrepare):
                record, reply = self.acceptor.on_prepare(msg)
            else:
                record, reply = self.acceptor.on_propose(msg)
            if record is not None and not self._persist(record):
                return []  # an unwritten promise must stay unspoken
            return [(src, reply)]
        if msg.paxos_id < self.next_round():
            return self._decided_reply(src, msg.paxos_id)
        return self._behind(now, src, msg.paxos_id)

    def _persist(self, record) -> bool:
        """Chain the previous round's commit to this record write."""
        try:
            self.engine.commit_track(self.track_id)
            save_acceptor(self.engine.fs, self.track_id, record)
        except Exception:
            log.exception("track %d: acceptor persistence failed",
                          self.track_id)
            return False
        return True

    def _decided_reply(self, src: int, paxos_id: int) -> Addressed:
        if paxos_id >= self.next_round():
            return []
        value = self.engine.round_value(self.track_id, paxos_id)
        # a trimmed round comes back empty; the peer falls back to catchup
        return [(src, PaxosRoundDecided(self.quorum_id, paxos_id,
                                        value or b"",
                                        self.next_round() - 1))]

    def _behind(self, now: float, src: int, seen_round: int) -> Addressed:
        self.gap_target = max(self.gap_target, seen_round)
        target = self.leader_hint or src
        if now < self.catchup_at or not target or self.install is not None:
            return []
        self.catchup_at = now + self.tun.catchup_poll_ms
        return [(target, CatchupRequest(self.quorum_id, self.next_round()))]

    # -- learning and execution ------------------------------------------

    def _on_learn_value(self, now: float, src: int, paxos_id: int,
                        value: bytes) -> Addressed:
        if paxos_id == self.next_round() and value:
            return self._execute(paxos_id, value, now)
        if paxos_id > self.next_round():
            if self.buffered is None or paxos_id < self.buffered[0]:
                self.buffered = (paxos_id, value)
            return self._behind(now, src, paxos_id)
        return []

    def _on_learn_proposal(self, now: float, src: int,
                           msg: PaxosLearnProposal) -> Addressed:
        if msg.paxos_id != self.next_round():
            if msg.paxos_id > self.next_round():
                return self._behind(now, src, msg.paxos_id)
            return []
        if msg.paxos_id != self.acceptor.record.paxos_id:
            return [(src, PaxosRequestValue(self.quorum_id, msg.paxos_id))]
        value, out = self.acceptor.learn_by_proposal(msg, leader=src)
        if value is None:
            return out
        return out + self._execute(msg.paxos_id, value, now)

    def _on_round_decided(self, now: float, src: int,
                          msg: PaxosRoundDecided) -> Addressed:
        out: Addressed = []
        if msg.paxos_id == self.next_round() and msg.value:
            out += self._execute(msg.paxos_id, msg.value, now)
        if msg.current_paxos_id >= self.next_round():
            out += self._behind(now, src, msg.current_paxos_id)
        return out

    def _execute(self, paxos_id: int, value: bytes, now: float) -> Addressed:
        outcomes = self.engine.execute_round(self.track_id, paxos_id, value)
        # which members accepted, when this round was ours to complete;
        # activation checks it to confirm the joining node took part
        if self.proposer.paxos_id == paxos_id and \
                self.proposer.phase is Phase.LEARNED:
            self.last_round_accepts = frozenset(self.proposer.accepts)
        else:
            self.last_round_accepts = frozenset()
        resolved: Resolved = []
        if self.in_flight is not None and self.proposer.paxos_id == paxos_id:
            if value == self.in_flight_value:
                at = 0
                for commands, _, token in self.in_flight:
                    resolved.append((token, outcomes[at:at + len(commands)]))
                    at += len(commands)
                self.must_prepare = False  # steady state: prepare skipped
            else:
                # another proposer's value won this round; ours goes again
                self.pending.extendleft(reversed(self.in_flight))
                self.must_prepare = True
            self.in_flight = None
            self.in_flight_value = b""
        if self.proposer.paxos_id == paxos_id:
            self.proposer.finish_round()
        if self.acceptor.record.paxos_id <= paxos_id:
            self.acceptor.advance(paxos_id + 1)
        if self.on_executed is not None:
            self.on_executed(paxos_id, outcomes, resolved)
        out: Addressed = []
        if self.buffered is not None and self.buffered[0] == self.next_round():
            paxos_id, value = self.buffered
            self.buffered = None
            out += self._execute(paxos_id, value, now)
        return out + self._maybe_start(now)

    # -- catchup ----------------------------------------------------------

    def _serve_catchup(self, src: int, from_paxos_id: int) -> Addressed:
        if not self.is_leader:
            return []
        last = self.next_round() - 1
        oldest = self.engine.oldest_round_available(self.track_id)
        if from_paxos_id < oldest:
            snap, manifest = self.engine.catchup_snapshot(self.track_id)
            out: Addressed = [
                (src, CatchupDbRequired(self.quorum_id, oldest)),
                (src, CatchupDbBegin(self.quorum_id, snap, manifest)),
            ]
            for chunk_id, size in StorageEngine.manifest_chunks(manifest):
                offset = 0
                while True:
                    data = self.engine.read_chunk_slice(
                        chunk_id, offset, min(CATCHUP_SLICE, size - offset))
                    offset += len(data)
                    out.append((src, CatchupDbChunk(self.quorum_id, chunk_id,
                                                    offset - len(data), data,
                                                    1 if offset >= size else 0)))
                    if offset >= size:
                        break
            out.append((src, CatchupDbEnd(self.quorum_id)))
            return out
        out = []
        for paxos_id in range(from_paxos_id, last + 1):
            value = self.engine.round_value(self.track_id, paxos_id)
            if value is None:
                break
            out.append((src, CatchupRound(self.quorum_id, paxos_id, value,
                                          1 if paxos_id == last else 0)))
        return out

    def _on_catchup_round(self, now: float, src: int,
                          msg: CatchupRound) -> Addressed:
        out: Addressed = []
        if msg.paxos_id == self.next_round() and msg.value:
            out += self._execute(msg.paxos_id, msg.value, now)
        if msg.last:
            self.engine.commit_track(self.track_id)
            if self.gap_target >= self.next_round():
                # rounds decided since the serve began; ask again soon
                self.catchup_at = 0.0
        return out

    def _on_install(self, now: float, src: int, msg) -> Addressed:
        if isinstance(msg, CatchupDbBegin):
            if self.install is not None:
                self.install.abort()
            self.buffered = None
            self.in_flight = None
            self.in_flight_value = b""
            if self.round_in_flight:
                self.proposer.finish_round()
            self.install = InstallSession(self.engine, self.track_id,
                                          msg.snap_paxos_id, msg.manifest)
            return []
        if self.install is None:
            return []
        if isinstance(msg, CatchupDbChunk):
            try:
                self.install.chunk_data(msg.chunk_id, msg.offset, msg.data)
            except ValueError:
                log.warning("track %d: state copy stream broken; aborting",
                            self.track_id)
                self.install.abort()
                self.install = None
            return []
        # CatchupDbEnd
        session, self.install = self.install, None
        try:
            session.finish()
        except ValueError:
            log.warning("track %d: state copy rejected", self.track_id)
            return []
        self.acceptor.advance(self.next_round())
        self.catchup_at = now + self.tun.catchup_poll_ms
        return [(src, CatchupRequest(self.quorum_id, self.next_round()))]

    # -- timers -----------------------------------------------------------

    def tick(self, now: float) -> Addressed:
        out: Addressed = []
        if self.round_in_flight and now >= self.round_deadline:
            # a stalled round restarts from the prepare phase: some
            # acceptor may have accepted our value before the stall
            out += self.proposer.restart()
            self.round_deadline = now + self.tun.round_retry_ms
        if not self.round_in_flight:
            out += self._maybe_start(now)
        if self.gap_target >= self.next_round() and self.install is None \
                and now >= self.catchup_at:
            out += self._behind(now, self.leader_hint or 0, self.gap_target)
        return out
