"""Application-level liveness for node-to-node connections.

A transport can wedge without ever reporting an error: the peer process
is alive, the connection looks established, and yet nothing sent on it
arrives anymore.  Timeouts at the OS level do not catch this in any
useful time frame, so every connection a node cares about gets its own
heartbeat: a Ping on a quiet link every interval, and a forced
drop-and-rebuild of the connection when nothing at all has arrived
within the timeout.  A rebuilt connection starts clean, which is the
whole cure - the wedge lives in the old connection, not in the peer.

The watcher is sans-IO: the host sends the pings it returns and performs
the rebuilds it requests (close and reconnect for a real transport).
"""

from __future__ import annotations

from .config import Tunables


class ConnWatch:
    """Tracks per-peer traffic and decides when to ping or rebuild.

    disabled() watchers never ping and never request rebuilds, which
    leaves a wedged connection wedged - kept as a switch so the failure
    mode stays demonstrable.
    """

    def __init__(self, tun: Tunables, enabled: bool = True) -> None:
        self.interval = tun.conn_heartbeat_interval_ms
        self.timeout = tun.conn_heartbeat_timeout_ms
        self.enabled = enabled
        self.last_seen: dict[int, float] = {}
        self.last_ping: dict[int, float] = {}

    def watch(self, peer: int, now: float) -> None:
        """Start caring about a peer without having heard from it."""
        self.last_seen.setdefault(peer, now)

    def unwatch(self, peer: int) -> None:
        self.last_seen.pop(peer, None)
        self.last_ping.pop(peer, None)

    def saw(self, peer: int, now: float) -> None:
        """Any inbound message from a watched peer counts as liveness."""
        if peer in self.last_seen:
            self.last_seen[peer] = now

    def tick(self, now: float) -> tuple[list[int], list[int]]:
        """Returns (peers to ping, peers whose connection to rebuild)."""
        if not self.enabled:
            return [], []
        pings: list[int] = []
        rebuilds: list[int] = []
        for peer in sorted(self.last_seen):
            if now - self.last_seen[peer] >= self.timeout:
                rebuilds.append(peer)
                # the fresh connection gets a full window to speak up
                self.last_seen[peer] = now
                self.last_ping.pop(peer, None)
                continue
            if now - self.last_ping.get(peer, -self.interval) >= self.interval:
                self.last_ping[peer] = now
                pings.append(peer)
        return pings, rebuilds
