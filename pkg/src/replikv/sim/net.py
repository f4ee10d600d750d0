"""A virtual network with delay, loss, duplication, partitions, and
stuck connections.

Messages cross the wire as encoded frames and are decoded again at
delivery, so the codec is exercised on every hop and a duplicated
delivery hands the receiver a fresh object.

A *stuck* link models a wedged transport: the connection looks healthy
but nothing gets through anymore.  Cluster heartbeats are exempt — they
ride other paths in a real deployment — which is exactly what makes the
failure nasty: everything looks alive while replication is dead.  A
connection rebuild (requested by the per-connection watchdog) replaces
the wedged transport and clears the stuck state.
"""

from __future__ import annotations

import random

from ..messages import (Heartbeat, HeartbeatAck, MasterAnnounce, Message)

# message classes that still arrive over a stuck (wedged) connection
STUCK_EXEMPT = (Heartbeat, HeartbeatAck, MasterAnnounce)


class VirtualNetwork:
    def __init__(self, rng: random.Random, delay_min: int = 1,
                 delay_max: int = 100, drop: float = 0.01,
                 dup: float = 0.01) -> None:
        self.rng = rng
        self.delay_min = delay_min
        self.delay_max = delay_max
        self.drop = drop
        self.dup = dup
        self.groups: list[set[int]] = []   # empty means no partition
        self.stuck: set[frozenset[int]] = set()
        self.dropped = 0
        self.delivered = 0

    # -- fault controls --------------------------------------------------

    def partition(self, groups: list[set[int]]) -> None:
        self.groups = [set(g) for g in groups]

    def heal(self) -> None:
        self.groups = []

    def stick(self, a: int, b: int) -> None:
        self.stuck.add(frozenset((a, b)))

    def rebuild(self, a: int, b: int) -> None:
        self.stuck.discard(frozenset((a, b)))

    # -- routing ---------------------------------------------------------

    def _group_of(self, node: int) -> int:
        for i, g in enumerate(self.groups):
            if node in g:
                return i
        return -1  # nodes not named in any group share the remainder

    def _severed(self, src: int, dst: int, msg: Message) -> bool:
        if self.groups and self._group_of(src) != self._group_of(dst):
            return True
        if frozenset((src, dst)) in self.stuck \
                and not isinstance(msg, STUCK_EXEMPT):
            return True
        return False

    def send(self, now: int, src: int, dst: int,
             msg: Message) -> list[tuple[int, int, int, bytes]]:
        """Returns (deliver_at, src, dst, frame) tuples; possibly none."""
        frame = msg.encode_frame()
        if self._severed(src, dst, msg):
            self.dropped += 1
            return []
        if self.rng.random() < self.drop:
            self.dropped += 1
            return []
        copies = 2 if self.rng.random() < self.dup else 1
        out = []
        for _ in range(copies):
            delay = self.rng.randint(self.delay_min, self.delay_max)
            out.append((now + delay, src, dst, frame))
        self.delivered += 1
        return out
