"""Round-by-round replication over storage tracks.

Covers leader batching, commit chaining (a crashed node restarts exactly
one round behind and catches up from the leader's round log), strict
round routing (old rounds answered with their decided value, rounds
ahead buffered plus rate-limited catchup), stalled-round retries,
competing proposers, and the full state copy taken when the needed
rounds have been trimmed out of the log.  Every convergence assertion
compares complete track dumps byte for byte.
"""

import random

import pytest

from replikv.config import DEFAULT_TUNABLES
from replikv.messages import (CatchupDbBegin, CatchupDbRequired,
                              CatchupRequest, CatchupRound, PaxosPrepare,
                              PaxosPrepareGrant, PaxosLearnValue,
                              PaxosRoundDecided)
from replikv.paxos import Phase, QuorumKind
from replikv.rlog import NotLeader, ReplicatedLog
from replikv.storage.engine import StorageEngine
from replikv.storage.fs import VirtualFileSystem
from replikv.types import Command, Opcode, ProposalID, Status

Q = 7       # quorum id doubles as the track id
T1 = 101
S1 = 201
MEMBERS = (1, 2, 3)

SMALL = DEFAULT_TUNABLES.override(
    chunk_size_target=4 * 1024,
    log_segment_size=8 * 1024,
    redo_log_cap=64 * 1024,
    log_retention_bytes=32 * 1024,
    data_page_size=512,
    shard_split_size=64 * 1024,
)


def adopt():
    return Command(Opcode.ADOPT_TABLE, num=T1, num2=S1)


def c_set(key, value, client=0, req=0):
    return Command(Opcode.SET, table_id=T1, key=key, value=value,
                   client_id=client, request_id=req)


class Net:
    """Replication trio over an explicitly pumped lossless network."""

    def __init__(self, kind=QuorumKind.MAJORITY, tun=SMALL):
        self.tun = tun
        self.kind = kind
        self.now = 0.0
        self.fss = {n: VirtualFileSystem() for n in MEMBERS}
        self.engines = {}
        self.logs = {}
        self.runs = {n: 1 for n in MEMBERS}
        self.cut: set[tuple[int, int]] = set()  # (src, dest) blocked
        self.queue: list[tuple[int, int, object]] = []
        self.resolved = {n: [] for n in MEMBERS}  # (paxos_id, token)
        for n in MEMBERS:
            self._boot(n)

    def _boot(self, n):
        self.engines[n] = StorageEngine(self.fss[n], self.tun)
        rl = ReplicatedLog(n, self.runs[n], Q, Q, self.engines[n], MEMBERS,
                           self.kind, self.tun)
        rl.on_executed = (lambda node: lambda pid, outs, res:
                          self.resolved[node].extend(
                              (pid, tok) for tok, _ in res))(n)
        self.logs[n] = rl

    def crash_restart(self, n):
        self.fss[n].crash(random.Random(n))
        self.runs[n] += 1
        self._boot(n)

    def send(self, src, addressed):
        for dest, msg in addressed:
            self.queue.append((dest, src, msg))

    def pump(self, limit=10_000):
        while self.queue:
            dest, src, msg = self.queue.pop(0)
            if (src, dest) in self.cut or (dest, src) in self.cut:
                continue
            self.send(dest, self.logs[dest].on_message(self.now, src, msg))
            limit -= 1
            assert limit > 0, "network never went quiet"

    def tick(self, dt=0.0):
        self.now += dt
        for n in MEMBERS:
            self.send(n, self.logs[n].tick(self.now))

    def lead(self, n):
        for m in MEMBERS:
            self.send(m, self.logs[m].set_leader(m == n, self.now))

    def append(self, n, commands, token):
        self.send(n, self.logs[n].append(commands, token, self.now))

    def dumps(self):
        return [self.engines[n].dump_track(Q) for n in MEMBERS]

    def rounds(self, n):
        return self.engines[n].tracks[Q].last_executed


class TestLeaderRounds:
    def test_round_executes_everywhere(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt(), c_set(b"a", b"1")], "t0")
        net.pump()
        assert [net.rounds(n) for n in MEMBERS] == [1, 1, 1]
        assert net.resolved[1] == [(1, "t0")]
        first, *rest = net.dumps()
        assert all(d == first for d in rest)

    def test_queue_packs_into_next_round(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt()], "t0")
        # round 1 is in flight; everything queued now shares round 2
        for i in range(40):
            net.append(1, [c_set(b"k%02d" % i, b"v")], f"t{i + 1}")
        net.pump()
        assert net.rounds(1) == 2
        second_round = [tok for pid, tok in net.resolved[1] if pid == 2]
        assert len(second_round) == 40
        first, *rest = net.dumps()
        assert all(d == first for d in rest)

    def test_append_gates(self):
        net = Net()
        net.lead(1)
        with pytest.raises(NotLeader):
            net.logs[2].append([adopt()], None, net.now)
        with pytest.raises(ValueError):
            net.logs[1].append([], None, net.now)
        big = [c_set(b"k", b"x" * SMALL.max_round_value_size)]
        with pytest.raises(ValueError):
            net.logs[1].append(big, None, net.now)

    def test_steady_state_skips_prepare(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt()], None)
        net.pump()
        prepares = []
        send = net.send

        def spy(src, addressed):
            prepares.extend(m for _, m in addressed
                            if isinstance(m, PaxosPrepare))
            send(src, addressed)

        net.send = spy
        net.append(1, [c_set(b"a", b"1")], None)
        net.pump()
        assert net.rounds(1) == 2
        assert prepares == []  # leaseholder steady state proposes directly


class TestCommitChaining:
    def run_rounds(self, net, k, start=0):
        for i in range(k):
            net.append(1, [c_set(b"key%03d" % (start + i), b"v")], None)
            net.pump()

    def test_next_round_propose_commits_previous(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt()], None)
        net.pump()
        # round 2 reaches node 2 only as a propose; node 3 sees nothing
        net.append(1, [c_set(b"a", b"1")], None)
        for dest, src, msg in list(net.queue):
            if dest == 2:
                net.queue.remove((dest, src, msg))
                net.send(2, net.logs[2].on_message(net.now, src, msg))
        net.queue.clear()
        net.crash_restart(2)
        net.crash_restart(3)
        # the propose for round 2 carried round 1's durability with it
        assert net.rounds(2) == 1
        assert net.rounds(3) == 0

    def test_crashed_follower_restarts_one_behind_and_catches_up(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt()], None)
        net.pump()
        self.run_rounds(net, 3)
        last = net.rounds(1)
        net.crash_restart(3)
        assert net.rounds(3) == last - 1  # exactly one round behind
        net.append(1, [c_set(b"after", b"x")], None)
        net.pump()
        net.tick(net.tun.round_retry_ms + 1)  # retry the stalled round
        net.pump()
        net.tick(net.tun.round_retry_ms + 1)
        net.pump()
        assert [net.rounds(n) for n in MEMBERS] == [last + 1] * 3
        first, *rest = net.dumps()
        assert all(d == first for d in rest)

    def test_crashed_leader_hands_over_and_rejoins(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt()], None)
        net.pump()
        self.run_rounds(net, 2)
        last = net.rounds(2)
        net.crash_restart(1)
        assert net.rounds(1) == last - 1
        net.lead(2)
        net.append(2, [c_set(b"handover", b"y")], None)
        net.pump()
        for _ in range(3):
            net.tick(net.tun.round_retry_ms + 1)
            net.pump()
        assert [net.rounds(n) for n in MEMBERS] == [last + 1] * 3
        first, *rest = net.dumps()
        assert all(d == first for d in rest)


class TestRoundRouting:
    def seeded(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt()], None)
        net.pump()
        net.append(1, [c_set(b"a", b"1")], None)
        net.pump()
        return net

    def test_old_round_gets_decided_value(self):
        net = self.seeded()
        out = net.logs[2].on_message(net.now, 1,
                                     PaxosPrepare(Q, 1, ProposalID(9, 9, 1)))
        [(dest, reply)] = out
        assert dest == 1 and isinstance(reply, PaxosRoundDecided)
        assert reply.paxos_id == 1 and reply.value
        assert reply.current_paxos_id == net.rounds(2)

    def test_learn_ahead_buffers_and_requests_catchup(self):
        net = self.seeded()
        net.cut = {(1, 3), (2, 3)}
        net.append(1, [c_set(b"b", b"2")], None)
        net.pump()
        net.tick(net.tun.round_retry_ms + 1)
        net.pump()  # rounds 3 decided by 1+2 while 3 is dark
        assert net.rounds(3) == 2
        net.append(1, [c_set(b"c", b"3")], None)
        net.pump()
        net.cut = set()
        ahead = net.rounds(1)
        assert ahead == net.rounds(3) + 2
        value = net.engines[1].round_value(Q, ahead)
        # node 3's first news of the era is an out-of-order learn
        out = net.logs[3].on_message(net.now, 1,
                                     PaxosLearnValue(Q, ahead, value))
        assert net.logs[3].buffered is not None
        assert [m for _, m in out if isinstance(m, CatchupRequest)]
        net.send(3, out)
        net.pump()
        net.tick(net.tun.round_retry_ms + 1)
        net.pump()
        assert net.rounds(3) >= ahead - 1

    def test_promise_survives_restart(self):
        net = self.seeded()
        rival = ProposalID(40, 1, 1)
        nxt = net.logs[2].next_round()
        out = net.logs[2].on_message(net.now, 1, PaxosPrepare(Q, nxt, rival))
        assert isinstance(out[0][1], PaxosPrepareGrant)
        net.crash_restart(2)
        assert net.logs[2].acceptor.record.paxos_id == nxt
        assert net.logs[2].acceptor.record.promised == rival

    def test_no_reply_when_persistence_fails(self, monkeypatch):
        net = self.seeded()

        def broken(fs, track_id, record):
            raise OSError("disk gone")

        monkeypatch.setattr("replikv.rlog.save_acceptor", broken)
        nxt = net.logs[2].next_round()
        out = net.logs[2].on_message(net.now, 1,
                                     PaxosPrepare(Q, nxt, ProposalID(41, 1, 1)))
        assert out == []  # an unwritten promise stays unspoken


class TestCompetingProposers:
    def test_loser_requeues_and_both_apply(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt()], None)
        net.pump()
        # a buggy host crowns both; replication must stay safe anyway
        net.send(1, net.logs[1].set_leader(True, net.now))
        net.send(2, net.logs[2].set_leader(True, net.now))
        net.append(1, [c_set(b"from1", b"a")], "w1")
        net.append(2, [c_set(b"from2", b"b")], "w2")
        for _ in range(20):
            net.pump()
            net.tick(net.tun.round_retry_ms + 1)
        net.pump()
        done = {tok for _, tok in net.resolved[1] + net.resolved[2]
                if tok is not None}
        assert done == {"w1", "w2"}
        first, *rest = net.dumps()
        assert all(d == first for d in rest)
        got = dict(net.engines[3].list_range(Q, T1)[1])
        assert got[b"from1"] == b"a" and got[b"from2"] == b"b"


class TestTotalPolicy:
    def test_total_round_needs_every_member(self):
        net = Net(kind=QuorumKind.TOTAL)
        net.lead(1)
        net.cut = {(1, 3), (2, 3), (3, 1), (3, 2)}
        net.append(1, [adopt()], None)
        net.pump()
        assert net.rounds(1) == 0  # two accepts are not enough
        net.cut = set()
        net.tick(net.tun.round_retry_ms + 1)
        net.pump()
        assert [net.rounds(n) for n in MEMBERS] == [1, 1, 1]


class TestDbCatchup:
    def test_trimmed_log_triggers_full_state_copy(self):
        net = Net()
        net.lead(1)
        net.append(1, [adopt()], None)
        net.pump()
        net.cut = {(1, 3), (2, 3), (3, 1), (3, 2)}
        payload = random.Random(7).randbytes(512)
        rounds = 0
        while net.engines[1].oldest_round_available(Q) <= 2:
            net.append(1, [c_set(b"bulk%04d" % rounds, payload)], None)
            net.pump()
            rounds += 1
            assert rounds < 500, "log never trimmed"
        assert net.rounds(3) == 1  # missed everything while dark
        saw = []
        send = net.send

        def spy(src, addressed):
            saw.extend(type(m).__name__ for _, m in addressed)
            send(src, addressed)

        net.send = spy
        net.cut = set()
        net.append(1, [c_set(b"fresh", b"z")], None)
        net.pump()
        for _ in range(6):
            net.tick(net.tun.catchup_poll_ms + 1)
            net.pump()
        assert "CatchupDbRequired" in saw and "CatchupDbBegin" in saw
        for _ in range(3):
            net.tick(net.tun.round_retry_ms + 1)
            net.pump()
        assert net.rounds(3) == net.rounds(1)
        first, *rest = net.dumps()
        assert all(d == first for d in rest)
