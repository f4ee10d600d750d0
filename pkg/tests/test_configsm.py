"""Config state machine: determinism, rejection atomicity, tiling."""

from __future__ import annotations

import random

from replikv.configsm import apply_config_command, shards_tile
from replikv.types import (ClusterConfig, Command, Opcode, ShardDescriptor,
                           Status, encode_node_ids, encode_shard_list)


def register(cfg, node_id, endpoint="n"):
    st, _ = apply_config_command(
        cfg, Command(Opcode.CONFIG_REGISTER_SERVER, num=node_id,
                     value=f"{endpoint}{node_id}".encode()))
    assert st == Status.OK


def build_basic() -> tuple[ClusterConfig, int, int, int]:
    cfg = ClusterConfig()
    for n in (11, 12, 13):
        register(cfg, n)
    st, qid = apply_config_command(
        cfg, Command(Opcode.CONFIG_CREATE_QUORUM, value=encode_node_ids([11, 12, 13])))
    assert st == Status.OK
    st, did = apply_config_command(
        cfg, Command(Opcode.CONFIG_CREATE_DATABASE, value=b"testDatabase"))
    assert st == Status.OK
    st, tid = apply_config_command(
        cfg, Command(Opcode.CONFIG_CREATE_TABLE, num=did, num2=qid, value=b"testTable"))
    assert st == Status.OK
    return cfg, qid, did, tid


def test_create_table_produces_full_range_shard():
    cfg, qid, did, tid = build_basic()
    shards = cfg.shards_of_table(tid)
    assert len(shards) == 1
    assert shards[0].first_key == b"" and shards[0].last_key == b""
    assert cfg.tables[tid].quorum_id == qid
    assert shards_tile(shards)


def test_same_command_stream_yields_identical_bytes():
    a = build_basic()[0]
    b = build_basic()[0]
    a.config_version = b.config_version = 17
    assert a.encode() == b.encode()
    assert ClusterConfig.decode(a.encode()).encode() == a.encode()


def test_rejected_command_leaves_config_unchanged():
    cfg, qid, did, tid = build_basic()
    before = cfg.encode()
    bad = [
        Command(Opcode.CONFIG_CREATE_DATABASE, value=b"testDatabase"),     # duplicate
        Command(Opcode.CONFIG_CREATE_TABLE, num=99, num2=qid, value=b"x"),  # unknown db
        Command(Opcode.CONFIG_CREATE_QUORUM, value=encode_node_ids([99])),  # unknown node
        Command(Opcode.CONFIG_ACTIVATE, num=qid, num2=11),                 # already active
        Command(Opcode.CONFIG_DELETE_QUORUM, num=qid),                     # holds a table
        Command(Opcode.CONFIG_SET_PRIMARY, num=qid, num2=99),              # not a member
        Command(Opcode.CONFIG_RENAME_DATABASE, num=did, value=b""),        # empty name
    ]
    for cmd in bad:
        st, _ = apply_config_command(cfg, cmd)
        assert st in (Status.BAD_REQUEST, Status.CONFLICT), cmd.opcode.name
        assert cfg.encode() == before, cmd.opcode.name


def test_activation_cycle_and_conflicts():
    cfg, qid, _, _ = build_basic()
    q = cfg.quorums[qid]
    st, _ = apply_config_command(cfg, Command(Opcode.CONFIG_DEACTIVATE, num=qid, num2=12))
    assert st == Status.OK
    assert q.active_node_ids == [11, 13] and q.inactive_node_ids == [12]

    st, _ = apply_config_command(cfg, Command(Opcode.CONFIG_DEACTIVATE, num=qid, num2=12))
    assert st == Status.CONFLICT

    st, _ = apply_config_command(cfg, Command(Opcode.CONFIG_ACTIVATE, num=qid, num2=12))
    assert st == Status.OK
    assert q.active_node_ids == [11, 12, 13] and q.inactive_node_ids == []

    st, _ = apply_config_command(cfg, Command(Opcode.CONFIG_ACTIVATE, num=qid, num2=12))
    assert st == Status.CONFLICT


def test_last_active_member_cannot_be_deactivated():
    cfg, qid, _, _ = build_basic()
    assert apply_config_command(cfg, Command(Opcode.CONFIG_DEACTIVATE, num=qid, num2=11))[0] == Status.OK
    assert apply_config_command(cfg, Command(Opcode.CONFIG_DEACTIVATE, num=qid, num2=12))[0] == Status.OK
    st, _ = apply_config_command(cfg, Command(Opcode.CONFIG_DEACTIVATE, num=qid, num2=13))
    assert st == Status.CONFLICT
    assert cfg.quorums[qid].active_node_ids == [13]


def test_primary_cleared_when_deactivated():
    cfg, qid, _, _ = build_basic()
    assert apply_config_command(cfg, Command(Opcode.CONFIG_SET_PRIMARY, num=qid, num2=11))[0] == Status.OK
    assert cfg.quorums[qid].primary_node_id == 11
    assert apply_config_command(cfg, Command(Opcode.CONFIG_DEACTIVATE, num=qid, num2=11))[0] == Status.OK
    assert cfg.quorums[qid].primary_node_id == 0


def test_update_shards_enforces_tiling():
    cfg, qid, did, tid = build_basic()
    ok = [ShardDescriptor(100, tid, b"", b"m"), ShardDescriptor(101, tid, b"m", b"")]
    st, _ = apply_config_command(
        cfg, Command(Opcode.CONFIG_UPDATE_SHARDS, num=qid, value=encode_shard_list(ok)))
    assert st == Status.OK
    assert [s.shard_id for s in cfg.shards_of_table(tid)] == [100, 101]

    gap = [ShardDescriptor(102, tid, b"", b"m"), ShardDescriptor(103, tid, b"n", b"")]
    st, _ = apply_config_command(
        cfg, Command(Opcode.CONFIG_UPDATE_SHARDS, num=qid, value=encode_shard_list(gap)))
    assert st == Status.BAD_REQUEST
    assert [s.shard_id for s in cfg.shards_of_table(tid)] == [100, 101]

    overlap = [ShardDescriptor(104, tid, b"", b"n"), ShardDescriptor(105, tid, b"m", b"")]
    st, _ = apply_config_command(
        cfg, Command(Opcode.CONFIG_UPDATE_SHARDS, num=qid, value=encode_shard_list(overlap)))
    assert st == Status.BAD_REQUEST


def test_tiling_holds_across_random_splits():
    cfg, qid, did, tid = build_basic()
    rng = random.Random(9)
    current = cfg.shards_of_table(tid)
    next_id = 1000
    for _ in range(60):
        victim = rng.choice(current)
        lo = victim.first_key or b"\x00"
        hi = victim.last_key or b"\xff\xff"
        split = bytes([rng.randrange(1, 250)]) * rng.randrange(1, 4)
        if not (lo < split < hi):
            continue
        replacement = [
            ShardDescriptor(next_id, tid, victim.first_key, split, True),
            ShardDescriptor(next_id + 1, tid, split, victim.last_key, True),
        ]
        next_id += 2
        current = [s for s in current if s.shard_id != victim.shard_id] + replacement
        st, _ = apply_config_command(
            cfg, Command(Opcode.CONFIG_UPDATE_SHARDS, num=qid,
                         value=encode_shard_list(current)))
        assert st == Status.OK
        assert shards_tile(cfg.shards_of_table(tid))


def test_delete_database_drops_tables_and_shards():
    cfg, qid, did, tid = build_basic()
    assert apply_config_command(cfg, Command(Opcode.CONFIG_DELETE_DATABASE, num=did))[0] == Status.OK
    assert cfg.tables == {} and cfg.shards == {}
    # quorum is now empty and deletable
    assert apply_config_command(cfg, Command(Opcode.CONFIG_DELETE_QUORUM, num=qid))[0] == Status.OK
