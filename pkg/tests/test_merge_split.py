"""Merge and split transparency: maintenance must never change what
readers see, and deletion markers may disappear only when a merge covers
a shard's entire chunk list.  Chunk files are checked directly with the
inspection helpers, not just through the read path."""

import random

from replikv.config import DEFAULT_TUNABLES
from replikv.storage.chunk import TAG_DELETE
from replikv.storage.engine import StorageEngine, chunk_name
from replikv.storage.fs import VirtualFileSystem
from replikv.storage.inspect import chunk_entries, verify_directory
from replikv.types import Command, Opcode, Status, encode_commands

TRACK = 5
T1 = 101
S1 = 201

TUN = DEFAULT_TUNABLES.override(
    chunk_size_target=8 * 1024,
    data_page_size=512,
    log_segment_size=32 * 1024,
    redo_log_cap=1 << 22,
    log_retention_bytes=1 << 22,
    shard_split_size=4 * 1024,
)


class Rig:
    def __init__(self):
        self.fs = VirtualFileSystem()
        self.engine = StorageEngine(self.fs, TUN)
        self.next_round = 1

    def round(self, cmds):
        out = self.engine.execute_round(TRACK, self.next_round, encode_commands(cmds))
        self.next_round += 1
        return out

    def sets(self, pairs):
        self.round([Command(Opcode.SET, table_id=T1, key=k, value=v)
                    for k, v in pairs])

    def deletes(self, keys):
        self.round([Command(Opcode.DELETE, table_id=T1, key=k) for k in keys])

    def table_view(self):
        status, items, total = self.engine.list_range(TRACK, T1)
        assert status == Status.OK
        assert total == len(items)
        return items

    def data_shards(self):
        tr = self.engine.tracks[TRACK]
        return sorted(tr.shards.values(),
                      key=lambda s: (s.descriptor.first_key != b"", s.descriptor.first_key))

    def serialize(self):
        self.engine.serialize_all(self.engine.tracks[TRACK])

    def tombstones_in(self, chunk_id):
        return sum(1 for _, tag, _ in chunk_entries(self.fs, chunk_name(chunk_id))
                   if tag == TAG_DELETE)


def test_tombstones_kept_on_partial_merge_elided_on_full():
    rig = Rig()
    rig.round([Command(Opcode.ADOPT_TABLE, num=T1, num2=S1)])
    rig.sets([(b"k%02d" % i, b"old%d" % i) for i in range(1, 7)])
    rig.serialize()
    rig.sets([(b"m%02d" % i, b"mid%d" % i) for i in range(10, 16)])
    rig.serialize()
    rig.deletes([b"k01"])  # the live value sits two chunks back
    rig.sets([(b"m11", b"newer")])
    rig.serialize()
    shard = rig.data_shards()[0]
    assert len(shard.chunk_ids) == 3
    first, second, third = shard.chunk_ids
    assert rig.tombstones_in(third) == 1

    before = rig.table_view()
    assert rig.engine.merge_shard(rig.engine.tracks[TRACK], shard, [second, third])
    assert rig.table_view() == before
    assert len(shard.chunk_ids) == 2
    merged = shard.chunk_ids[1]
    # k01's live value lives in the untouched first chunk, so the partial
    # merge must carry the marker forward or the delete would un-happen
    assert rig.tombstones_in(merged) == 1
    assert rig.engine.get(TRACK, T1, b"k01") == (Status.NOT_FOUND, b"")
    assert rig.engine.get(TRACK, T1, b"m11") == (Status.OK, b"newer")

    assert rig.engine.merge_shard(rig.engine.tracks[TRACK], shard)
    assert rig.table_view() == before
    assert len(shard.chunk_ids) == 1
    assert rig.tombstones_in(shard.chunk_ids[0]) == 0
    keys = [k for k, _, _ in chunk_entries(rig.fs, chunk_name(shard.chunk_ids[0]))]
    assert b"k01" not in keys
    assert verify_directory(rig.fs) == []


def test_full_merge_with_all_keys_deleted_leaves_no_chunk():
    rig = Rig()
    rig.round([Command(Opcode.ADOPT_TABLE, num=T1, num2=S1)])
    rig.sets([(b"a", b"1"), (b"b", b"2")])
    rig.serialize()
    rig.deletes([b"a", b"b"])
    rig.serialize()
    shard = rig.data_shards()[0]
    assert rig.engine.merge_shard(rig.engine.tracks[TRACK], shard)
    assert shard.chunk_ids == []
    assert rig.table_view() == []
    assert verify_directory(rig.fs) == []


def test_split_shares_then_merges_drop_foreign_keys():
    rng = random.Random(77)
    rig = Rig()
    rig.round([Command(Opcode.ADOPT_TABLE, num=T1, num2=S1)])
    rows = {b"k%05d" % i: rng.randbytes(30) for i in rng.sample(range(30000), 2000)}
    items = sorted(rows.items())
    for i in range(0, len(items), 200):
        rig.sets(items[i:i + 200])
    rig.serialize()
    before = rig.table_view()
    assert before == items

    pick = rig.engine.compute_split(TRACK)
    assert pick is not None
    shard_id, split_key = pick
    rig.round([Command(Opcode.SPLIT_SHARD, num=shard_id, key=split_key)])
    assert rig.table_view() == before
    left, right = rig.data_shards()
    shared = set(left.chunk_ids) & set(right.chunk_ids)
    assert shared, "a split must share chunks, not copy them"

    # merging the left side rewrites it to only its own key range
    assert rig.engine.merge_shard(rig.engine.tracks[TRACK], left)
    assert rig.table_view() == before
    for cid in left.chunk_ids:
        for key, _, _ in chunk_entries(rig.fs, chunk_name(cid)):
            assert key < split_key
    # the right side still references the originals
    for cid in shared:
        assert rig.fs.exists(chunk_name(cid))
        assert rig.engine.refs[cid] == 1

    assert rig.engine.merge_shard(rig.engine.tracks[TRACK], right)
    assert rig.table_view() == before
    for cid in right.chunk_ids:
        for key, _, _ in chunk_entries(rig.fs, chunk_name(cid)):
            assert key >= split_key
    for cid in shared:
        assert not rig.fs.exists(chunk_name(cid)), "unreferenced original must be deleted"
    assert verify_directory(rig.fs) == []


def test_ten_thousand_key_table_invariant_under_random_maintenance():
    rng = random.Random(4242)
    rig = Rig()
    rig.round([Command(Opcode.ADOPT_TABLE, num=T1, num2=S1)])
    model: dict[bytes, bytes] = {}
    keys = [b"r%06d" % i for i in rng.sample(range(500000), 10000)]
    for i in range(0, len(keys), 250):
        batch = keys[i:i + 250]
        pairs = [(k, rng.randbytes(rng.randrange(5, 40))) for k in batch]
        rig.sets(pairs)
        model.update(pairs)
        doomed = [k for k in batch if rng.random() < 0.15]
        if doomed:
            rig.deletes(doomed)
            for k in doomed:
                model.pop(k, None)
    reference = sorted(model.items())
    assert rig.table_view() == reference

    for step in range(25):
        tr = rig.engine.tracks[TRACK]
        roll = rng.random()
        if roll < 0.35:
            rig.serialize()
        elif roll < 0.65:
            shards = rig.data_shards()
            shard = shards[rng.randrange(len(shards))]
            if len(shard.chunk_ids) >= 2:
                if rng.random() < 0.5:
                    n = rng.randrange(2, len(shard.chunk_ids) + 1)
                    start = rng.randrange(0, len(shard.chunk_ids) - n + 1)
                    rig.engine.merge_shard(tr, shard, shard.chunk_ids[start:start + n])
                else:
                    rig.engine.merge_shard(tr, shard)
        else:
            pick = rig.engine.compute_split(TRACK)
            if pick is not None:
                rig.round([Command(Opcode.SPLIT_SHARD, num=pick[0], key=pick[1])])
        assert rig.table_view() == reference, f"maintenance step {step} changed the view"
        descriptors = [s.descriptor for s in rig.data_shards()]
        assert descriptors[0].first_key == b""
        assert descriptors[-1].last_key == b""
        for a, b in zip(descriptors, descriptors[1:]):
            assert a.last_key == b.first_key
    assert verify_directory(rig.fs) == []
