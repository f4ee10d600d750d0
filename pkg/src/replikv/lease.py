"""Lease-based master election: Paxos rounds over volatile acceptor state.

The elected value is always a request to hold the master lease for a
bounded time, so nothing needs to survive a crash: an acceptor that
restarts simply stays quiet for one full lease duration, by which time
every promise it ever made has expired.  All times on the wire are
durations; each node compares only against its own clock.  An acceptor
holds an accepted lease 10% longer than granted so that an owner whose
clock runs slow demotes itself before any acceptor frees the slot.
"""

from __future__ import annotations

from .messages import (LeasePrepare, LeasePrepareGrant, LeasePrepareReject,
                       LeasePropose, LeaseProposeAccept, LeaseProposeReject,
                       Message)
from .paxos import Phase
from .types import ProposalID

Addressed = list[tuple[int, Message]]

DEFAULT_LEASE_MS = 3000

# acceptors hold leases longer than owners believe them valid; covers
# clock rates diverging by a few percent plus delivery delay
HOLD_NUM, HOLD_DEN = 11, 10


class LeaseAcceptor:
    """Volatile acceptor: a promise and at most one timed lease."""

    __slots__ = ("promised", "accepted", "lease_node_id", "lease_expiry")

    def __init__(self):
        self.promised: ProposalID | None = None
        self.accepted: ProposalID | None = None
        self.lease_node_id = 0
        self.lease_expiry = 0

    def _gc(self, now: int) -> None:
        if self.accepted is not None and now >= self.lease_expiry:
            self.accepted = None
            self.lease_node_id = 0
            self.lease_expiry = 0

    def on_prepare(self, now: int, msg: LeasePrepare) -> Message:
        self._gc(now)
        if self.promised is not None and msg.proposal < self.promised:
            return LeasePrepareReject(msg.proposal, self.promised)
        self.promised = msg.proposal
        if self.accepted is None:
            return LeasePrepareGrant(msg.proposal, None, 0, 0)
        return LeasePrepareGrant(msg.proposal, self.accepted,
                                 self.lease_node_id,
                                 self.lease_expiry - now)

    def on_propose(self, now: int, msg: LeasePropose) -> Message:
        self._gc(now)
        if self.promised is not None and msg.proposal < self.promised:
            return LeaseProposeReject(msg.proposal, self.promised)
        if self.accepted is not None \
                and self.lease_node_id != msg.lease_node_id:
            # an unexpired lease for someone else: refuse, and name the
            # proposal the rival must outbid
            return LeaseProposeReject(msg.proposal,
                                      self.promised or msg.proposal)
        self.promised = msg.proposal
        self.accepted = msg.proposal
        self.lease_node_id = msg.lease_node_id
        self.lease_expiry = now + msg.duration_ms * HOLD_NUM // HOLD_DEN
        return LeaseProposeAccept(msg.proposal)


class LeaseNode:
    """One member's complete lease stack: acceptor, proposer, timers.

    The host feeds every lease message through on_message() and calls
    tick() whenever its timer fires; both return addressed messages to
    send.  Ownership is a pure function of the local clock: is_owner()
    flips false the instant the locally computed expiry passes, without
    waiting for a tick.
    """

    def __init__(self, node_id: int, run_id: int, members: tuple[int, ...],
                 now: int, duration_ms: int = DEFAULT_LEASE_MS,
                 retry_ms: int | None = None):
        self.node_id = node_id
        self.run_id = run_id
        self.members = members
        self.duration_ms = duration_ms
        self.retry_ms = retry_ms if retry_ms is not None else duration_ms // 4
        self.acceptor = LeaseAcceptor()
        # volatile state means a fresh node must sit out one full lease
        # duration: every promise it made before crashing dies first
        self.quiet_until = now + duration_ms
        self.counter = 0
        self.phase = Phase.IDLE
        self.proposal = ProposalID(0, run_id, node_id)
        self.started_at = 0  # local send time the expiry is computed from
        self.proposed_node = 0
        self.proposed_duration = 0
        self.grants: dict[int, tuple[ProposalID | None, int, int]] = {}
        self.accepts: set[int] = set()
        self.local_expiry = 0
        self.owner_hint = 0  # last owner seen in grants; advisory only
        self.retry_at = 0
        self.round_deadline = 0

    # -- observers -------------------------------------------------------

    @property
    def threshold(self) -> int:
        return len(self.members) // 2 + 1

    def is_owner(self, now: int) -> bool:
        return now < self.local_expiry

    # -- proposer side ---------------------------------------------------

    def _begin_round(self, now: int) -> Addressed:
        self.counter += 1
        self.proposal = ProposalID(self.counter, self.run_id, self.node_id)
        self.phase = Phase.PREPARING
        self.started_at = now
        self.grants = {}
        self.accepts = set()
        self.round_deadline = now + self.retry_ms
        return [(m, LeasePrepare(self.proposal)) for m in self.members]

    def _abandon(self, now: int) -> None:
        self.phase = Phase.IDLE
        self.retry_at = now + self.retry_ms

    def _outbid(self, rival: ProposalID) -> None:
        if rival.counter > self.counter:
            self.counter = rival.counter

    def on_message(self, now: int, src: int, msg: Message) -> Addressed:
        if now < self.quiet_until:
            return []
        if isinstance(msg, LeasePrepare):
            return [(src, self.acceptor.on_prepare(now, msg))]
        if isinstance(msg, LeasePropose):
            return [(src, self.acceptor.on_propose(now, msg))]
        if isinstance(msg, LeasePrepareGrant):
            return self._on_grant(now, src, msg)
        if isinstance(msg, LeasePrepareReject):
            if self.phase is Phase.PREPARING and msg.proposal == self.proposal:
                self._outbid(msg.promised)
                self._abandon(now)
            return []
        if isinstance(msg, LeaseProposeAccept):
            return self._on_accept(now, src, msg)
        if isinstance(msg, LeaseProposeReject):
            if self.phase is Phase.PROPOSING and msg.proposal == self.proposal:
                self._outbid(msg.promised)
                self._abandon(now)
            return []
        raise AssertionError(f"unrouted lease message {msg!r}")

    def _on_grant(self, now: int, src: int,
                  msg: LeasePrepareGrant) -> Addressed:
        if self.phase is not Phase.PREPARING or msg.proposal != self.proposal:
            return []
        self.grants[src] = (msg.accepted, msg.lease_node_id,
                            msg.lease_remaining_ms)
        if len(self.grants) < self.threshold:
            return []
        # adopt the highest-numbered unexpired lease someone else holds;
        # re-proposing it cannot make us owner but drives it to a quorum,
        # as the value rules require.  Our own old lease we may extend.
        best: ProposalID | None = None
        node, duration = self.node_id, self.duration_ms
        for accepted, lease_node, remaining in self.grants.values():
            if accepted is None or remaining <= 0 \
                    or lease_node == self.node_id:
                continue
            if best is None or accepted > best:
                best, node, duration = accepted, lease_node, remaining
        self.phase = Phase.PROPOSING
        self.proposed_node = node
        self.proposed_duration = duration
        if node != self.node_id:
            self.owner_hint = node
        self.accepts = set()
        propose = LeasePropose(self.proposal, node, duration)
        return [(m, propose) for m in self.members]

    def _on_accept(self, now: int, src: int,
                   msg: LeaseProposeAccept) -> Addressed:
        if self.phase is not Phase.PROPOSING or msg.proposal != self.proposal:
            return []
        self.accepts.add(src)
        if len(self.accepts) < self.threshold:
            return []
        self.phase = Phase.IDLE
        if self.proposed_node == self.node_id:
            # expiry counts from before the round went out, so every
            # acceptor's timer outlives our belief in the lease
            self.local_expiry = self.started_at + self.proposed_duration
            self.owner_hint = self.node_id
            self.retry_at = 0
        else:
            # refreshed someone else's lease: sleep out its full term, so
            # repeated probes never keep a dead owner's lease alive
            self.retry_at = now + self.proposed_duration
        return []

    # -- timers ----------------------------------------------------------

    def tick(self, now: int) -> Addressed:
        if now < self.quiet_until:
            return []
        if self.phase is not Phase.IDLE:
            if now >= self.round_deadline:
                self._abandon(now)
                if self.is_owner(now):
                    self.retry_at = now  # keep fighting for the extension
            return []
        if self.is_owner(now):
            if now >= self.local_expiry - self.duration_ms // 2 \
                    and now >= self.retry_at:
                return self._begin_round(now)
            return []
        if now >= self.retry_at:
            return self._begin_round(now)
        return []
