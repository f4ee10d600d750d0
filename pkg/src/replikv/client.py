"""Client library: a sans-IO request state machine with failover.

The core owns every decision — routing, batching, retries, config
refresh — and speaks through the same (now, src, message) surface as the
cluster nodes, so the simulated world and the real socket host drive
identical logic.

Every submission returns a token; poll() yields a three-part result:
did every request reach a server, did the call finish inside the global
timeout, and what did the cluster look like when it mattered.  A request
only counts as successful when all three parts are clean and each
per-request outcome is OK or NOT_FOUND — everything else is a fault the
caller can reason about instead of a stack trace.

Failover is the library's job: a lost primary, a config change, or a
silent server costs retries inside the timeout budget, not errors.
Servers deduplicate by (client, request) id, so a retried write that
already landed replays its original outcome instead of applying twice.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from enum import Enum

from .config import Tunables
from .messages import (ClientConfig, ClientGet, ClientGetConfig,
                       ClientGetResult, ClientList, ClientListResult,
                       ClientLock, ClientLockResult, ClientTxBegin,
                       ClientTxBeginResult, ClientTxCommit, ClientTxRollback,
                       ClientWrite, ClientWriteResult, Message,
                       decode_outcomes, decode_pairs)
from .rlog import Addressed
from .types import (ClusterConfig, Command, Opcode, Status, encode_commands)

log = logging.getLogger("replikv.client")


class NetworkStatus(Enum):
    ALL_SENT = "all_sent"
    SOME_UNSENT = "some_unsent"


class TimeoutStatus(Enum):
    COMPLETED = "completed"
    TIMED_OUT = "timed_out"


class ClusterStatus(Enum):
    OK = "ok"
    NO_MASTER = "no_master"
    NO_PRIMARY = "no_primary"
    NO_QUORUM = "no_quorum"


@dataclass
class RequestOutcome:
    status: Status
    value: bytes = b""
    items: list[tuple[bytes, bytes]] = field(default_factory=list)
    total: int = 0


@dataclass
class ClientResult:
    network: NetworkStatus
    timeout: TimeoutStatus
    cluster: ClusterStatus
    outcomes: list[RequestOutcome]
    request_ids: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (self.network is NetworkStatus.ALL_SENT
                and self.timeout is TimeoutStatus.COMPLETED
                and self.cluster is ClusterStatus.OK
                and all(o.status in (Status.OK, Status.NOT_FOUND)
                        for o in self.outcomes))


@dataclass
class _Op:
    """One logical request; request_id is stable across every retry."""

    request_id: int
    kind: str                   # write | get | list | txbegin | lock | commit
    table_id: int = 0
    command: Command | None = None
    key: bytes = b""
    list_args: tuple | None = None   # (start, end, prefix, count, rev, cnt)
    quorum_id: int = 0          # pinned for transaction ops
    txid: int = 0
    commands: bytes = b""       # buffered writes for commit
    outcome: RequestOutcome | None = None
    ever_sent: bool = False
    retry_at: float = 0.0


@dataclass
class _Batch:
    token: int
    ops: list[_Op]
    deadline: float
    done: ClientResult | None = None


class ClientCore:
    """The client state machine; one instance per client identity."""

    def __init__(self, controllers: list[int], now: float,
                 tun: Tunables | None = None,
                 client_id: int | None = None,
                 rng: random.Random | None = None) -> None:
        rng = rng or random.Random()
        self.client_id = client_id if client_id is not None \
            else rng.getrandbits(63) | 1
        self.tun = tun if tun is not None else Tunables()
        self.controllers = list(controllers)
        self.config: ClusterConfig | None = None
        self.master_id = 0
        self.hints: dict[int, tuple[int, int]] = {}  # quorum -> (node, seen version)
        self._seq = 0
        self.batches: dict[int, _Batch] = {}
        self.envelopes: dict[int, tuple[int, list[_Op]]] = {}  # rid -> (quorum, ops)
        self.config_asked_at = -1e18
        self.last_config_rid = 0

    # -- submission ------------------------------------------------------

    def _rid(self) -> int:
        self._seq += 1
        return self._seq

    def _submit(self, ops: list[_Op], now: float) -> int:
        token = self._rid()
        self.batches[token] = _Batch(token, ops,
                                     now + self.tun.global_timeout_ms)
        return token

    def submit_writes(self, writes: list[tuple[Opcode, int, bytes, bytes]],
                      now: float) -> int:
        """Each write is (opcode, table_id, key, value); ADD passes its
        delta as a decimal value, TRUNCATE ignores key and value."""
        ops = []
        for opcode, table_id, key, value in writes:
            rid = self._rid()
            if opcode is Opcode.ADD:
                cmd = Command(Opcode.ADD, table_id=table_id, key=key,
                              num=int(value), client_id=self.client_id,
                              request_id=rid)
            elif opcode is Opcode.TRUNCATE:
                cmd = Command(Opcode.TRUNCATE, table_id=table_id,
                              client_id=self.client_id, request_id=rid)
            else:
                cmd = Command(opcode, table_id=table_id, key=key,
                              value=value, client_id=self.client_id,
                              request_id=rid)
            ops.append(_Op(rid, "write", table_id=table_id, command=cmd))
        return self._submit(ops, now)

    def make_command(self, opcode: Opcode, table_id: int, key: bytes = b"",
                     value: bytes = b"", num: int = 0) -> Command:
        """A write command stamped with this client's identity, for
        buffering into a transaction commit."""
        return Command(opcode, table_id=table_id, key=key, value=value,
                       num=num, client_id=self.client_id,
                       request_id=self._rid())

    def submit_get(self, table_id: int, key: bytes, now: float) -> int:
        return self._submit([_Op(self._rid(), "get", table_id=table_id,
                                 key=key)], now)

    def submit_list(self, table_id: int, now: float, start: bytes = b"",
                    end: bytes = b"", prefix: bytes = b"", count: int = 0,
                    reverse: bool = False, count_only: bool = False) -> int:
        args = (start, end, prefix, count, reverse, count_only)
        return self._submit([_Op(self._rid(), "list", table_id=table_id,
                                 list_args=args)], now)

    def submit_tx_begin(self, quorum_id: int, now: float) -> int:
        return self._submit([_Op(self._rid(), "txbegin",
                                 quorum_id=quorum_id)], now)

    def submit_lock(self, quorum_id: int, txid: int, table_id: int,
                    key: bytes, now: float) -> int:
        return self._submit([_Op(self._rid(), "lock", table_id=table_id,
                                 key=key, quorum_id=quorum_id, txid=txid)],
                            now)

    def submit_commit(self, quorum_id: int, txid: int,
                      buffered: list[Command], now: float) -> int:
        stamped = [cmd if cmd.request_id else
                   replace(cmd, client_id=self.client_id,
                           request_id=self._rid())
                   for cmd in buffered]
        return self._submit([_Op(self._rid(), "commit", quorum_id=quorum_id,
                                 txid=txid,
                                 commands=encode_commands(stamped))], now)

    def rollback(self, quorum_id: int, txid: int) -> Addressed:
        target = self._primary(quorum_id)
        if not target:
            return []
        return [(target, ClientTxRollback(self._rid(), self.client_id,
                                          txid, quorum_id))]

    def poll(self, token: int) -> ClientResult | None:
        batch = self.batches.get(token)
        if batch is None or batch.done is None:
            return None
        del self.batches[token]
        return batch.done

    # -- routing ---------------------------------------------------------

    def _quorum_of(self, op: _Op) -> int | None:
        if op.quorum_id:
            return op.quorum_id
        if self.config is None:
            return None
        table = self.config.tables.get(op.table_id)
        return table.quorum_id if table is not None else None

    def _primary(self, quorum_id: int | None) -> int:
        if quorum_id is None or self.config is None:
            return 0
        hint = self.hints.get(quorum_id)
        if hint is not None \
                and hint[1] >= self.config.config_version and hint[0]:
            return hint[0]
        q = self.config.quorums.get(quorum_id)
        return q.primary_node_id if q is not None else 0

    def _obstacle(self, op: _Op) -> ClusterStatus:
        if self.config is None or self.master_id == 0:
            return ClusterStatus.NO_MASTER
        qid = self._quorum_of(op)
        if qid is None:
            return ClusterStatus.NO_QUORUM
        q = self.config.quorums.get(qid)
        if q is None or not q.active_node_ids:
            return ClusterStatus.NO_QUORUM
        if not self._primary(qid):
            return ClusterStatus.NO_PRIMARY
        return ClusterStatus.OK

    # -- the pump --------------------------------------------------------

    def tick(self, now: float) -> Addressed:
        out: Addressed = []
        if self.config is None \
                and now - self.config_asked_at >= self.tun.round_retry_ms:
            out += self._ask_config(now)
        for batch in list(self.batches.values()):
            if batch.done is not None:
                continue
            if now >= batch.deadline:
                self._finalize(batch, TimeoutStatus.TIMED_OUT)
                continue
            out += self._route_batch(batch, now)
        return out

    def _ask_config(self, now: float) -> Addressed:
        self.config_asked_at = now
        self.last_config_rid = self._rid()
        return [(c, ClientGetConfig(self.last_config_rid))
                for c in self.controllers]

    def _route_batch(self, batch: _Batch, now: float) -> Addressed:
        due = [op for op in batch.ops
               if op.outcome is None and now >= op.retry_at]
        if not due:
            return []
        if self.config is None:
            return []
        out: Addressed = []
        write_groups: dict[int, list[_Op]] = {}
        for op in due:
            qid = self._quorum_of(op)
            target = self._primary(qid)
            if not target:
                continue
            if op.kind == "write":
                write_groups.setdefault(qid, []).append(op)
                continue
            op.ever_sent = True
            op.retry_at = now + self.tun.round_retry_ms
            rid = op.request_id
            if op.kind == "get":
                out.append((target, ClientGet(rid, op.table_id, op.key)))
            elif op.kind == "list":
                start, end, prefix, count, rev, cnt = op.list_args
                out.append((target, ClientList(rid, op.table_id, start,
                                               end, prefix, count,
                                               int(rev), int(cnt))))
            elif op.kind == "txbegin":
                out.append((target, ClientTxBegin(rid, self.client_id,
                                                  qid)))
            elif op.kind == "lock":
                out.append((target, ClientLock(rid, self.client_id,
                                               op.txid, op.table_id,
                                               op.key)))
            elif op.kind == "commit":
                out.append((target, ClientTxCommit(rid, self.client_id,
                                                   op.txid, qid,
                                                   op.commands)))
        for qid, ops in sorted(write_groups.items()):
            target = self._primary(qid)
            rid = self._rid()
            self.envelopes[rid] = (qid, ops)
            for op in ops:
                op.ever_sent = True
                op.retry_at = now + self.tun.round_retry_ms
            commands = encode_commands([op.command for op in ops])
            out.append((target, ClientWrite(rid, self.client_id, qid,
                                            commands)))
        return out

    def _finalize(self, batch: _Batch,
                  timeout: TimeoutStatus) -> None:
        unresolved = [op for op in batch.ops if op.outcome is None]
        network = NetworkStatus.ALL_SENT
        cluster = ClusterStatus.OK
        if unresolved:
            if any(not op.ever_sent for op in unresolved):
                network = NetworkStatus.SOME_UNSENT
            cluster = self._obstacle(unresolved[0])
        outcomes = [op.outcome if op.outcome is not None
                    else RequestOutcome(Status.NO_SERVICE)
                    for op in batch.ops]
        batch.done = ClientResult(network, timeout, cluster, outcomes,
                                  [op.request_id for op in batch.ops])
        self.envelopes = {rid: (qid, ops)
                          for rid, (qid, ops) in self.envelopes.items()
                          if ops[0] not in batch.ops}

    def _maybe_complete(self, batch: _Batch) -> None:
        if batch.done is None \
                and all(op.outcome is not None for op in batch.ops):
            self._finalize(batch, TimeoutStatus.COMPLETED)

    # -- replies ---------------------------------------------------------

    def on_message(self, now: float, src: int, msg: Message) -> Addressed:
        if isinstance(msg, ClientConfig):
            return self._on_config(now, msg)
        if isinstance(msg, ClientWriteResult):
            if msg.request_id in self.envelopes:
                return self._on_write_result(now, src, msg)
            return self._on_single_result(now, src, msg)
        if isinstance(msg, (ClientGetResult, ClientListResult,
                            ClientTxBeginResult, ClientLockResult)):
            return self._on_single_result(now, src, msg)
        return []

    def _on_config(self, now: float, msg: ClientConfig) -> Addressed:
        self.master_id = msg.master_node_id
        cfg = ClusterConfig.decode(msg.config)
        news = self.config is None \
            or cfg.config_version > self.config.config_version
        if self.config is None \
                or cfg.config_version >= self.config.config_version:
            self.config = cfg
            for qid in list(self.hints):
                if self.hints[qid][1] < cfg.config_version:
                    del self.hints[qid]
        if not news:
            return []
        # push or fresh fetch: stalled requests get another shot now
        out: Addressed = []
        for batch in self.batches.values():
            if batch.done is None:
                for op in batch.ops:
                    op.retry_at = 0.0
                out += self._route_batch(batch, now)
        return out

    def _find_op(self, request_id: int) -> tuple[_Batch, _Op] | None:
        for batch in self.batches.values():
            for op in batch.ops:
                if op.request_id == request_id and op.outcome is None:
                    return batch, op
        return None

    def _hint(self, qid: int, node: int, version: int) -> None:
        old = self.hints.get(qid)
        if old is None or version >= old[1]:
            self.hints[qid] = (node, version)

    def _on_write_result(self, now: float, src: int,
                         msg: ClientWriteResult) -> Addressed:
        qid, ops = self.envelopes.pop(msg.request_id)
        status = Status(msg.status)
        if status is Status.OK:
            outs = decode_outcomes(msg.outcomes)
            for op, (s, v) in zip(ops, outs):
                if op.outcome is None:
                    op.outcome = RequestOutcome(Status(s), v)
        elif status is Status.NOT_PRIMARY:
            retarget = self._retarget(qid, src, msg.primary_hint,
                                      msg.config_version)
            for op in ops:
                op.retry_at = 0.0 if retarget \
                    else now + self.tun.round_retry_ms
        else:
            for op in ops:
                if op.outcome is None:
                    op.outcome = RequestOutcome(status)
        out: Addressed = []
        for batch in list(self.batches.values()):
            if any(op in ops for op in batch.ops):
                self._maybe_complete(batch)
                if batch.done is None and status is Status.NOT_PRIMARY:
                    out += self._route_batch(batch, now)
        return out

    def _retarget(self, qid: int | None, refused_by: int, hint: int,
                  seen_version: int) -> bool:
        """Adopt a fresher primary hint; report whether the route now
        points somewhere new.  A retry to the same node that just
        refused waits for the retry timer instead of spinning."""
        if qid is not None:
            self._hint(qid, hint, seen_version)
        self._stale_config(seen_version)
        if self.config is None or qid is None:
            return False
        target = self._primary(qid)
        return bool(target) and target != refused_by

    def _on_single_result(self, now: float, src: int, msg) -> Addressed:
        found = self._find_op(msg.request_id)
        if found is None:
            return []
        batch, op = found
        status = Status(msg.status)
        if status is Status.NOT_PRIMARY:
            retarget = self._retarget(self._quorum_of(op), src,
                                      msg.primary_hint, msg.config_version)
            op.retry_at = 0.0 if retarget \
                else now + self.tun.round_retry_ms
            return self._route_batch(batch, now) if retarget else []
        if isinstance(msg, ClientGetResult):
            op.outcome = RequestOutcome(status, msg.value)
        elif isinstance(msg, ClientListResult):
            op.outcome = RequestOutcome(status,
                                        items=decode_pairs(msg.items),
                                        total=msg.total)
        elif isinstance(msg, ClientTxBeginResult):
            op.outcome = RequestOutcome(status, total=msg.txid)
        elif isinstance(msg, ClientWriteResult):  # a commit's reply
            outs = decode_outcomes(msg.outcomes) if msg.outcomes else []
            op.outcome = RequestOutcome(status,
                                        items=[(b"", v) for _, v in outs])
        else:
            op.outcome = RequestOutcome(status)
        self._maybe_complete(batch)
        return []

    def _stale_config(self, seen_version: int) -> None:
        if self.config is not None \
                and seen_version > self.config.config_version:
            self.config = None  # forces a refresh on the next tick


# -- conveniences built on the core -----------------------------------------


class SequenceSource:
    """Hands out unique ascending integers from a counter key.

    One replicated add buys a whole block; values are then served
    locally until the block runs dry.  Blocks are never returned, so a
    crashed client leaks at most one block — uniqueness survives."""

    def __init__(self, core: ClientCore, table_id: int, key: bytes):
        self.core = core
        self.table_id = table_id
        self.key = key
        self.next_value = 0
        self.limit = 0  # exclusive

    @property
    def ready(self) -> bool:
        return self.next_value < self.limit

    def take(self) -> int:
        assert self.ready
        value = self.next_value
        self.next_value += 1
        return value

    def start_fetch(self, now: float) -> int:
        batch = self.core.tun.sequence_batch
        return self.core.submit_writes(
            [(Opcode.ADD, self.table_id, self.key,
              str(batch).encode())], now)

    def feed(self, result: ClientResult) -> bool:
        if not result.ok:
            return False
        top = int(result.outcomes[0].value)
        self.next_value = top - self.core.tun.sequence_batch + 1
        self.limit = top + 1
        return True


class PagedIterator:
    """Walks a table in key order one page at a time; a page shorter
    than requested means the end was reached."""

    def __init__(self, core: ClientCore, table_id: int,
                 page_size: int = 100, prefix: bytes = b""):
        self.core = core
        self.table_id = table_id
        self.page_size = page_size
        self.prefix = prefix
        self.resume = b""
        self.exhausted = False

    def start_fetch(self, now: float) -> int:
        start = self.resume + b"\x00" if self.resume else b""
        return self.core.submit_list(self.table_id, now, start=start,
                                     prefix=self.prefix,
                                     count=self.page_size)

    def feed(self, result: ClientResult) -> list[tuple[bytes, bytes]]:
        if not result.ok:
            return []
        items = result.outcomes[0].items
        if items:
            self.resume = items[-1][0]
        if len(items) < self.page_size:
            self.exhausted = True
        return items
