"""Invariant monitors: the simulated cluster is audited from outside
while it runs, and its final state is checked against a replay model.

Probes sample the world every 100 virtual milliseconds:

- lease: at most one controller considers itself master, and at most
  one server holds each quorum's primary lease, on their own clocks.
- agreement: members of a quorum never disagree on the value of a
  replication round (spot-checked near the head during the run, and via
  canonical state dumps at the end).
- config: controllers at the same applied round hold byte-identical
  configuration, and no controller's applied round moves backwards.
- durability + read: the monitor collects the committed command stream
  from the members themselves, replays it into a model, and at the end
  requires that every acknowledged write is in the stream, every
  up-to-date member's state matches the model byte for byte, and every
  value a client ever read was committed at some point.
"""

from __future__ import annotations

import hashlib

from ..types import Opcode, decode_commands

MAX_VIOLATIONS = 25


class Monitors:
    def __init__(self, world, checks: set[str]) -> None:
        self.world = world
        self.checks = checks
        self.violations: list[str] = []
        self.suppressed = 0
        self.last_masters: tuple[int, ...] = ()
        self.master_history: list[tuple[int, tuple[int, ...]]] = []
        self.last_primaries: dict[int, tuple[int, ...]] = {}
        self.primary_history: dict[int, list[tuple[int, tuple[int, ...]]]] \
            = {}
        self.data_quorums = [i + 1 for i in range(len(world.sc.quorums))]
        self.members = {i + 1: list(m)
                        for i, (_, m) in enumerate(world.sc.quorums)}
        self.collected: dict[int, list[bytes]] = {
            q: [] for q in self.data_quorums}
        self.next_pid: dict[int, int] = {q: 1 for q in self.data_quorums}
        self.tainted: set[int] = set()
        self.config_seen: dict[int, str] = {}
        self.node_applied: dict[int, tuple[int, int]] = {}

    def violate(self, now: int, text: str) -> None:
        if len(self.violations) >= MAX_VIOLATIONS:
            self.suppressed += 1
            return
        self.violations.append(f"{now:>8} {text}")
        self.world.trace("VIOLATION " + text)

    # -- probes ----------------------------------------------------------

    def probe(self, now: int) -> None:
        if "lease" in self.checks:
            self._probe_lease(now)
        if "config" in self.checks:
            self._probe_config(now)
        if "agreement" in self.checks:
            self._probe_agreement(now)
        if "durability" in self.checks or "read" in self.checks:
            for qid in self.data_quorums:
                self._collect(now, qid, cap=500)

    def _probe_lease(self, now: int) -> None:
        masters = tuple(sorted(
            h.node_id for h in self.world.live_hosts("controller")
            if h.node.is_master(h.clock.local(now))))
        if len(masters) > 1:
            self.violate(now, f"two masters at once: {masters}")
        if masters != self.last_masters:
            self.last_masters = masters
            self.master_history.append((now, masters))
            self.world.trace(f"masters {list(masters)}")
        servers = self.world.live_hosts("server")
        for qid in self.data_quorums:
            holders = tuple(sorted(
                h.node_id for h in servers
                if h.node.is_primary(qid, h.clock.local(now))))
            if len(holders) > 1:
                self.violate(now, f"quorum {qid}: two primaries {holders}")
            if holders != self.last_primaries.get(qid):
                self.last_primaries[qid] = holders
                self.primary_history.setdefault(qid, []).append(
                    (now, holders))

    def _probe_config(self, now: int) -> None:
        for host in self.world.live_hosts("controller"):
            applied = host.node.applied_round
            if applied == 0:
                continue
            digest = hashlib.sha1(
                host.node.config.encode()).hexdigest()[:12]
            seen = self.config_seen.get(applied)
            if seen is None:
                self.config_seen[applied] = digest
            elif seen != digest:
                self.violate(now, f"controller {host.node_id}: config at "
                             f"round {applied} diverges")
            # a restart may legitimately come back one round behind (the
            # commit of the last round chains onto the next write), so
            # the no-rewind rule holds only within one process lifetime
            prev_gen, prev = self.node_applied.get(host.node_id,
                                                   (host.gen, 0))
            if prev_gen == host.gen and applied < prev:
                self.violate(now, f"controller {host.node_id}: applied "
                             f"round went {prev} -> {applied}")
            self.node_applied[host.node_id] = (host.gen, applied)

    def _quorum_tracks(self, qid: int):
        """Live members of a quorum that have begun the track."""
        out = []
        for sid in self.members[qid]:
            host = self.world.hosts[sid]
            if host.node is None:
                continue
            track = host.node.engine.tracks.get(qid)
            if track is not None:
                out.append((host, track))
        return out

    def _probe_agreement(self, now: int) -> None:
        for qid in self.data_quorums:
            pairs = self._quorum_tracks(qid)
            for i in range(len(pairs)):
                for j in range(i + 1, len(pairs)):
                    (ha, ta), (hb, tb) = pairs[i], pairs[j]
                    hi = min(ta.last_executed, tb.last_executed)
                    for pid in range(max(1, hi - 2), hi + 1):
                        va = ha.node.engine.round_value(qid, pid)
                        vb = hb.node.engine.round_value(qid, pid)
                        if va is not None and vb is not None and va != vb:
                            self.violate(
                                now, f"quorum {qid} round {pid}: "
                                f"{ha.node_id} and {hb.node_id} disagree")

    def _collect(self, now: int, qid: int, cap: int) -> None:
        if qid in self.tainted:
            return
        pairs = self._quorum_tracks(qid)
        if not pairs:
            return
        hi = max(track.last_executed for _, track in pairs)
        got = 0
        while self.next_pid[qid] <= hi and got < cap:
            pid = self.next_pid[qid]
            value = None
            for host, _ in pairs:
                value = host.node.engine.round_value(qid, pid)
                if value is not None:
                    break
            if value is None:
                if all(host.node.engine.oldest_round_available(qid) > pid
                       for host, track in pairs
                       if track.last_executed >= pid):
                    self.violate(now, f"quorum {qid}: round {pid} trimmed "
                                 "before the monitor could read it")
                    self.tainted.add(qid)
                break
            self.collected[qid].append(value)
            self.next_pid[qid] += 1
            got += 1

    # -- final audit -----------------------------------------------------

    def final(self, now: int) -> list[str]:
        for qid in self.data_quorums:
            self._collect(now, qid, cap=1_000_000)
        if "agreement" in self.checks:
            self._final_agreement(now)
        if "durability" in self.checks or "read" in self.checks:
            self._final_durability(now)
        self._final_sequences(now)
        return self.violations

    def _final_agreement(self, now: int) -> None:
        for qid in self.data_quorums:
            pairs = self._quorum_tracks(qid)
            if not pairs:
                continue
            top = max(track.last_executed for _, track in pairs)
            dumps = [(host, host.node.engine.dump_track(qid))
                     for host, track in pairs if track.last_executed == top]
            for host, dump in dumps[1:]:
                if dump != dumps[0][1]:
                    self.violate(now, f"quorum {qid}: state dumps differ "
                                 f"between {dumps[0][0].node_id} and "
                                 f"{host.node_id}")

    def _replay(self, qid: int):
        tables: dict[int, dict[bytes, bytes]] = {}
        history: dict[tuple[int, bytes], set[bytes]] = {}
        pairs: set[tuple[int, int]] = set()
        executed: set[tuple[int, int]] = set()
        for value in self.collected[qid]:
            touched: set[tuple[int, int]] = set()
            for cmd in decode_commands(value):
                if cmd.client_id:
                    pair = (cmd.client_id, cmd.request_id)
                    pairs.add(pair)
                    # a request that already executed in an earlier round
                    # replays its recorded outcome instead of re-applying
                    if pair in executed and pair not in touched:
                        continue
                    touched.add(pair)
                table = tables.get(cmd.table_id)
                if cmd.opcode is Opcode.SET:
                    if table is not None:
                        table[cmd.key] = cmd.value
                        history.setdefault((cmd.table_id, cmd.key),
                                           set()).add(cmd.value)
                elif cmd.opcode is Opcode.DELETE:
                    if table is not None:
                        table.pop(cmd.key, None)
                elif cmd.opcode is Opcode.ADD:
                    if table is None:
                        continue
                    try:
                        current = int(table.get(cmd.key, b"0"))
                    except ValueError:
                        continue
                    value_ = b"%d" % (current + cmd.num)
                    table[cmd.key] = value_
                    history.setdefault((cmd.table_id, cmd.key),
                                       set()).add(value_)
                elif cmd.opcode is Opcode.TRUNCATE:
                    if table is not None:
                        table.clear()
                elif cmd.opcode is Opcode.ADOPT_TABLE:
                    tables.setdefault(cmd.num, {})
                elif cmd.opcode is Opcode.DROP_TABLE:
                    tables.pop(cmd.num, None)
            executed |= touched
        return tables, history, pairs

    def _final_durability(self, now: int) -> None:
        acked_by_quorum: dict[int, list] = {q: [] for q in
                                            self.data_quorums}
        reads_by_quorum: dict[int, list] = {q: [] for q in
                                            self.data_quorums}
        for _, driver in sorted(self.world.drivers.items()):
            for rec in driver.acked:
                _, _, _, tid, _, _ = rec
                acked_by_quorum[self.world.quorum_of_table(tid)].append(rec)
            for tid, key, value in driver.reads:
                reads_by_quorum[self.world.quorum_of_table(tid)].append(
                    (tid, key, value))
        for qid in self.data_quorums:
            if qid in self.tainted:
                continue
            tables, history, pairs = self._replay(qid)
            if "durability" in self.checks:
                for cid, rid, op, tid, key, _ in acked_by_quorum[qid]:
                    if (cid, rid) not in pairs:
                        self.violate(now, f"acked write lost: client {cid}"
                                     f" request {rid} {op.name} "
                                     f"table {tid} key {key!r}")
                self._compare_members(now, qid, tables)
            if "read" in self.checks:
                for tid, key, value in reads_by_quorum[qid]:
                    if value not in history.get((tid, key), set()):
                        self.violate(now, f"read of table {tid} key "
                                     f"{key!r} returned a never-committed "
                                     f"value")

    def _compare_members(self, now: int, qid: int, model: dict) -> None:
        pairs = self._quorum_tracks(qid)
        if not pairs:
            self.violate(now, f"quorum {qid}: no live member to audit")
            return
        top = max(track.last_executed for _, track in pairs)
        if top != len(self.collected[qid]):
            self.violate(now, f"quorum {qid}: executed {top} rounds but "
                         f"monitor collected {len(self.collected[qid])}")
        for host, track in pairs:
            if track.last_executed != top:
                continue  # lagging member; catchup is its own feature
            engine = host.node.engine
            for tid in sorted(model):
                expect = sorted(model[tid].items())
                _, items, _ = engine.list_range(qid, tid)
                if items != expect:
                    self.violate(now, f"quorum {qid} table {tid}: "
                                 f"member {host.node_id} state differs "
                                 f"from the replayed model")

    def _final_sequences(self, now: int) -> None:
        values: list[int] = []
        for _, driver in sorted(self.world.drivers.items()):
            values.extend(driver.seq_values)
        if len(values) != len(set(values)):
            dupes = sorted({v for v in values if values.count(v) > 1})
            self.violate(now, f"sequence values repeated: {dupes[:5]}")
