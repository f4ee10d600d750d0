"""Single-round consensus state machines: proposer, acceptor, learner.

Each replication track runs rounds strictly one after another, so one
proposer/acceptor pair per track is enough.  The machines are sans-IO:
handlers return (destination node, message) pairs and never touch the
network or the clock, which is what lets the exhaustive interleaving
tests drive them directly.

Durability contract: when a handler returns an AcceptorRecord alongside
a reply, the host must persist the record before the reply leaves the
node.  A promise that is not on disk must never be spoken; if the
persist fails, the reply is dropped and the peer times out.

The leader fast path proposes with the distinguished zero proposal,
standing in for a prepare every acceptor implicitly granted at round
start.  Any real prepare outbids it, so a leader change always forces a
full round.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .messages import (Message, PaxosLearnProposal, PaxosLearnValue,
                       PaxosPrepare, PaxosPrepareGrant, PaxosPrepareReject,
                       PaxosPropose, PaxosProposeAccept, PaxosProposeReject,
                       PaxosRequestValue, AcceptorRecord)
from .types import ProposalID, ZERO_PROPOSAL

Addressed = list[tuple[int, Message]]


class QuorumKind(Enum):
    MAJORITY = "majority"
    TOTAL = "total"


@dataclass(frozen=True)
class QuorumPolicy:
    kind: QuorumKind
    members: tuple[int, ...]

    @property
    def threshold(self) -> int:
        if self.kind is QuorumKind.TOTAL:
            return len(self.members)
        return len(self.members) // 2 + 1


class Phase(Enum):
    IDLE = "idle"
    PREPARING = "preparing"
    PROPOSING = "proposing"
    LEARNED = "learned"


class Proposer:
    """Drives one value through one round.

    The host owns retry timing: when a handler leaves the proposer IDLE
    with a value still pending, the host restarts it after a randomized
    backoff (rejections carry the rival proposal, which the counter has
    already outbid by then).
    """

    def __init__(self, node_id: int, run_id: int, quorum_id: int,
                 policy: QuorumPolicy) -> None:
        self.node_id = node_id
        self.run_id = run_id
        self.quorum_id = quorum_id
        self.policy = policy
        self.counter = 0
        self.paxos_id = 0
        self.phase = Phase.IDLE
        self.proposal = ZERO_PROPOSAL
        self.own_value = b""
        self.proposed_value = b""
        self.grants: dict[int, tuple[ProposalID | None, bytes]] = {}
        self.accepts: set[int] = set()

    # -- helpers ---------------------------------------------------------

    def _fresh_proposal(self) -> ProposalID:
        self.counter += 1
        return ProposalID(self.counter, self.run_id, self.node_id)

    def _broadcast(self, msg: Message) -> Addressed:
        return [(member, msg) for member in self.policy.members]

    def _outbid(self, rival: ProposalID) -> None:
        if rival.counter > self.counter:
            self.counter = rival.counter

    @property
    def pending(self) -> bool:
        """A value was started but the round is not decided yet."""
        return self.phase in (Phase.PREPARING, Phase.PROPOSING) or (
            self.phase is Phase.IDLE and self.own_value != b"")

    # -- operations ------------------------------------------------------

    def start(self, paxos_id: int, value: bytes, fast_path: bool) -> Addressed:
        """Begin a proposal.  fast_path skips the prepare phase and is
        only sound for a lease holder past its first round as leader."""
        if self.phase in (Phase.PREPARING, Phase.PROPOSING) and \
                self.paxos_id == paxos_id:
            raise RuntimeError(f"round {paxos_id}: proposal already in flight")
        assert value
        self.paxos_id = paxos_id
        self.own_value = value
        self.grants = {}
        self.accepts = set()
        if fast_path:
            self.phase = Phase.PROPOSING
            self.proposal = ZERO_PROPOSAL
            self.proposed_value = value
            return self._broadcast(PaxosPropose(self.quorum_id, paxos_id,
                                                self.proposal, value))
        self.phase = Phase.PREPARING
        self.proposal = self._fresh_proposal()
        return self._broadcast(PaxosPrepare(self.quorum_id, paxos_id,
                                            self.proposal))

    def restart(self) -> Addressed:
        """Re-run the round as a full prepare with a fresh, higher
        proposal; keeps the pending value."""
        assert self.own_value
        self.phase = Phase.IDLE
        return self.start(self.paxos_id, self.own_value, fast_path=False)

    def on_prepare_grant(self, from_node: int, msg: PaxosPrepareGrant) -> Addressed:
        if self.phase is not Phase.PREPARING or msg.proposal != self.proposal \
                or msg.paxos_id != self.paxos_id:
            return []
        self.grants[from_node] = (msg.accepted, msg.accepted_value)
        if len(self.grants) < self.policy.threshold:
            return []
        # choose the value: the highest previously accepted one wins,
        # otherwise this proposer is free to use its own
        best: ProposalID | None = None
        value = self.own_value
        for accepted, accepted_value in self.grants.values():
            if accepted is not None and (best is None or accepted > best):
                best = accepted
                value = accepted_value
        self.proposed_value = value
        self.phase = Phase.PROPOSING
        self.accepts = set()
        return self._broadcast(PaxosPropose(self.quorum_id, self.paxos_id,
                                            self.proposal, value))

    def on_prepare_reject(self, from_node: int, msg: PaxosPrepareReject) -> Addressed:
        if self.phase is not Phase.PREPARING or msg.proposal != self.proposal \
                or msg.paxos_id != self.paxos_id:
            return []
        self._outbid(msg.promised)
        self.phase = Phase.IDLE
        return []

    def on_propose_accept(self, from_node: int, msg: PaxosProposeAccept) -> Addressed:
        if self.phase is not Phase.PROPOSING or msg.proposal != self.proposal \
                or msg.paxos_id != self.paxos_id:
            return []
        self.accepts.add(from_node)
        if len(self.accepts) < self.policy.threshold:
            return []
        self.phase = Phase.LEARNED
        out: Addressed = []
        for member in self.policy.members:
            if member in self.accepts:
                # the peer holds the value already; its proposal identity
                # is enough to learn by
                out.append((member, PaxosLearnProposal(self.quorum_id,
                                                       self.paxos_id,
                                                       self.proposal)))
            else:
                out.append((member, PaxosLearnValue(self.quorum_id,
                                                    self.paxos_id,
                                                    self.proposed_value)))
        return out

    def on_propose_reject(self, from_node: int, msg: PaxosProposeReject) -> Addressed:
        if self.phase is not Phase.PROPOSING or msg.proposal != self.proposal \
                or msg.paxos_id != self.paxos_id:
            return []
        self._outbid(msg.promised)
        self.phase = Phase.IDLE
        return []

    def decided(self) -> bytes | None:
        return self.proposed_value if self.phase is Phase.LEARNED else None

    def finish_round(self) -> None:
        """The round's value was executed; clear for the next round."""
        self.phase = Phase.IDLE
        self.own_value = b""
        self.proposed_value = b""
        self.grants = {}
        self.accepts = set()


class Acceptor:
    """Accepts proposals for the track's current round.

    Replies come paired with the record to persist first.  The record is
    the whole durable state, so a restart loads it and continues; a node
    that cannot read its record must not rejoin (see the state files).
    """

    def __init__(self, quorum_id: int,
                 record: AcceptorRecord | None = None) -> None:
        self.quorum_id = quorum_id
        self.record = record if record is not None else \
            AcceptorRecord(paxos_id=1, promised=None, accepted=None, value=b"")

    @property
    def paxos_id(self) -> int:
        return self.record.paxos_id

    def advance(self, paxos_id: int) -> AcceptorRecord:
        """Start a fresh round; returns the record to persist."""
        self.record = AcceptorRecord(paxos_id=paxos_id, promised=None,
                                     accepted=None, value=b"")
        return self.record

    def on_prepare(self, msg: PaxosPrepare) \
            -> tuple[AcceptorRecord | None, Message]:
        assert msg.paxos_id == self.record.paxos_id
        promised = self.record.promised
        if promised is not None and msg.proposal < promised:
            return None, PaxosPrepareReject(self.quorum_id, msg.paxos_id,
                                            msg.proposal, promised)
        self.record = AcceptorRecord(paxos_id=msg.paxos_id,
                                     promised=msg.proposal,
                                     accepted=self.record.accepted,
                                     value=self.record.value)
        grant = PaxosPrepareGrant(self.quorum_id, msg.paxos_id, msg.proposal,
                                  self.record.accepted, self.record.value)
        return self.record, grant

    def on_propose(self, msg: PaxosPropose) \
            -> tuple[AcceptorRecord | None, Message]:
        assert msg.paxos_id == self.record.paxos_id
        promised = self.record.promised
        if promised is not None and msg.proposal < promised:
            # in particular the zero fast path loses to any real promise,
            # forcing a changed leader through a full round
            return None, PaxosProposeReject(self.quorum_id, msg.paxos_id,
                                            msg.proposal, promised)
        # accepting also promises: the accepted proposal must never
        # exceed the promised one, or a lower rival could overwrite it
        self.record = AcceptorRecord(paxos_id=msg.paxos_id,
                                     promised=msg.proposal,
                                     accepted=msg.proposal,
                                     value=msg.value)
        return self.record, PaxosProposeAccept(self.quorum_id, msg.paxos_id,
                                               msg.proposal)

    def learn_by_proposal(self, msg: PaxosLearnProposal, leader: int) \
            -> tuple[bytes | None, Addressed]:
        """Resolve a value-free learn; asks the leader when the accepted
        proposal does not match (e.g. state lost in a crash window)."""
        if self.record.accepted == msg.proposal:
            return self.record.value, []
        return None, [(leader, PaxosRequestValue(self.quorum_id,
                                                 msg.paxos_id))]
