"""Deterministic state machine over ClusterConfig.

Every controller applies the same command stream and must land on the
same bytes, so all id allocation comes from counters inside the config
and every rejection leaves the config untouched.  Statuses map onto the
REST layer: BAD_REQUEST for unknown ids and invalid arguments, CONFLICT
for operations that contradict current state.
"""

from __future__ import annotations

from .types import (ClusterConfig, Command, DatabaseMeta, Opcode, QuorumMeta,
                    ServerMeta, ShardDescriptor, Status, TableMeta,
                    decode_node_ids, decode_shard_list)

CONFIG_OPCODES = frozenset(op for op in Opcode if op.name.startswith("CONFIG_"))


def shards_tile(shards: list[ShardDescriptor]) -> bool:
    """True when the ranges cover (-inf, +inf) exactly once, in order."""
    if not shards:
        return False
    ordered = sorted(shards, key=lambda s: (s.first_key != b"", s.first_key))
    if ordered[0].first_key != b"" or ordered[-1].last_key != b"":
        return False
    for a, b in zip(ordered, ordered[1:]):
        if a.last_key == b"" or a.last_key != b.first_key:
            return False
    return True


def apply_config_command(cfg: ClusterConfig, cmd: Command) -> tuple[Status, int]:
    """Apply one command in place; returns (status, affected object id).

    A non-OK status means cfg was not modified.
    """
    op = cmd.opcode
    if op == Opcode.CONFIG_REGISTER_SERVER:
        cfg.servers[cmd.num] = ServerMeta(cmd.num, cmd.value.decode())
        return Status.OK, cmd.num

    if op == Opcode.CONFIG_CREATE_DATABASE:
        name = cmd.value.decode()
        if not name:
            return Status.BAD_REQUEST, 0
        if cfg.database_by_name(name) is not None:
            return Status.CONFLICT, 0
        did = cfg.next_database_id
        cfg.next_database_id += 1
        cfg.databases[did] = DatabaseMeta(did, name)
        return Status.OK, did

    if op == Opcode.CONFIG_RENAME_DATABASE:
        db = cfg.databases.get(cmd.num)
        name = cmd.value.decode()
        if db is None or not name:
            return Status.BAD_REQUEST, 0
        clash = cfg.database_by_name(name)
        if clash is not None and clash.database_id != db.database_id:
            return Status.CONFLICT, 0
        db.name = name
        return Status.OK, db.database_id

    if op == Opcode.CONFIG_DELETE_DATABASE:
        db = cfg.databases.get(cmd.num)
        if db is None:
            return Status.BAD_REQUEST, 0
        for t in cfg.tables_of_database(db.database_id):
            for s in cfg.shards_of_table(t.table_id):
                del cfg.shards[s.shard_id]
            del cfg.tables[t.table_id]
        del cfg.databases[db.database_id]
        return Status.OK, cmd.num

    if op == Opcode.CONFIG_CREATE_TABLE:
        db = cfg.databases.get(cmd.num)
        quorum = cfg.quorums.get(cmd.num2)
        name = cmd.value.decode()
        if db is None or quorum is None or not name:
            return Status.BAD_REQUEST, 0
        if cfg.table_by_name(db.database_id, name) is not None:
            return Status.CONFLICT, 0
        tid = cfg.next_table_id
        cfg.next_table_id += 1
        sid = cfg.next_shard_id
        cfg.next_shard_id += 1
        cfg.tables[tid] = TableMeta(tid, db.database_id, quorum.quorum_id, name)
        cfg.shards[sid] = ShardDescriptor(sid, tid)
        return Status.OK, tid

    if op == Opcode.CONFIG_RENAME_TABLE:
        t = cfg.tables.get(cmd.num)
        name = cmd.value.decode()
        if t is None or not name:
            return Status.BAD_REQUEST, 0
        clash = cfg.table_by_name(t.database_id, name)
        if clash is not None and clash.table_id != t.table_id:
            return Status.CONFLICT, 0
        t.name = name
        return Status.OK, t.table_id

    if op == Opcode.CONFIG_DELETE_TABLE:
        t = cfg.tables.get(cmd.num)
        if t is None:
            return Status.BAD_REQUEST, 0
        for s in cfg.shards_of_table(t.table_id):
            del cfg.shards[s.shard_id]
        del cfg.tables[t.table_id]
        return Status.OK, cmd.num

    if op == Opcode.CONFIG_CREATE_QUORUM:
        node_ids = decode_node_ids(cmd.value)
        if not node_ids or len(set(node_ids)) != len(node_ids):
            return Status.BAD_REQUEST, 0
        if any(n not in cfg.servers for n in node_ids):
            return Status.BAD_REQUEST, 0
        qid = cfg.next_quorum_id
        cfg.next_quorum_id += 1
        cfg.quorums[qid] = QuorumMeta(qid, active_node_ids=sorted(node_ids))
        return Status.OK, qid

    if op == Opcode.CONFIG_DELETE_QUORUM:
        q = cfg.quorums.get(cmd.num)
        if q is None:
            return Status.BAD_REQUEST, 0
        if cfg.tables_of_quorum(q.quorum_id):
            return Status.CONFLICT, 0
        del cfg.quorums[q.quorum_id]
        return Status.OK, cmd.num

    if op == Opcode.CONFIG_ADD_NODE:
        q = cfg.quorums.get(cmd.num)
        if q is None or cmd.num2 not in cfg.servers:
            return Status.BAD_REQUEST, 0
        if cmd.num2 in q.active_node_ids or cmd.num2 in q.inactive_node_ids:
            return Status.CONFLICT, 0
        q.inactive_node_ids = sorted(q.inactive_node_ids + [cmd.num2])
        return Status.OK, cmd.num2

    if op == Opcode.CONFIG_REMOVE_NODE:
        q = cfg.quorums.get(cmd.num)
        if q is None:
            return Status.BAD_REQUEST, 0
        if cmd.num2 in q.active_node_ids:
            if len(q.active_node_ids) == 1:
                return Status.CONFLICT, 0
            q.active_node_ids = [n for n in q.active_node_ids if n != cmd.num2]
            if q.primary_node_id == cmd.num2:
                q.primary_node_id = 0
            return Status.OK, cmd.num2
        if cmd.num2 in q.inactive_node_ids:
            q.inactive_node_ids = [n for n in q.inactive_node_ids if n != cmd.num2]
            return Status.OK, cmd.num2
        return Status.BAD_REQUEST, 0

    if op == Opcode.CONFIG_ACTIVATE:
        q = cfg.quorums.get(cmd.num)
        if q is None:
            return Status.BAD_REQUEST, 0
        if cmd.num2 not in q.inactive_node_ids:
            return Status.CONFLICT, 0
        q.inactive_node_ids = [n for n in q.inactive_node_ids if n != cmd.num2]
        q.active_node_ids = sorted(q.active_node_ids + [cmd.num2])
        return Status.OK, cmd.num2

    if op == Opcode.CONFIG_DEACTIVATE:
        q = cfg.quorums.get(cmd.num)
        if q is None:
            return Status.BAD_REQUEST, 0
        if cmd.num2 not in q.active_node_ids:
            return Status.CONFLICT, 0
        if len(q.active_node_ids) == 1:
            # the last active member keeps the quorum's data reachable
            return Status.CONFLICT, 0
        q.active_node_ids = [n for n in q.active_node_ids if n != cmd.num2]
        q.inactive_node_ids = sorted(q.inactive_node_ids + [cmd.num2])
        if q.primary_node_id == cmd.num2:
            q.primary_node_id = 0
        return Status.OK, cmd.num2

    if op == Opcode.CONFIG_SET_PRIMARY:
        q = cfg.quorums.get(cmd.num)
        if q is None:
            return Status.BAD_REQUEST, 0
        if cmd.num2 == 0:
            q.primary_node_id = 0
            return Status.OK, 0
        if cmd.num2 not in q.active_node_ids:
            return Status.CONFLICT, 0
        q.primary_node_id = cmd.num2
        return Status.OK, cmd.num2

    if op == Opcode.CONFIG_UPDATE_SHARDS:
        q = cfg.quorums.get(cmd.num)
        if q is None:
            return Status.BAD_REQUEST, 0
        reported = decode_shard_list(cmd.value)
        quorum_tables = {t.table_id for t in cfg.tables_of_quorum(q.quorum_id)}
        by_table: dict[int, list[ShardDescriptor]] = {}
        for s in reported:
            if s.table_id not in quorum_tables:
                return Status.BAD_REQUEST, 0
            by_table.setdefault(s.table_id, []).append(s)
        for table_id, shards in by_table.items():
            if not shards_tile(shards):
                return Status.BAD_REQUEST, 0
        # replace descriptors only for tables the report covers
        for table_id, shards in by_table.items():
            for old in cfg.shards_of_table(table_id):
                del cfg.shards[old.shard_id]
            for s in shards:
                cfg.shards[s.shard_id] = s
        return Status.OK, cmd.num

    return Status.BAD_REQUEST, 0
