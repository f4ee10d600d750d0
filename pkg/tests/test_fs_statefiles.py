"""Filesystem abstractions, per-node state files, and the directory
inspection tool."""

import random

import pytest

from replikv.config import DEFAULT_TUNABLES
from replikv.messages import AcceptorRecord
from replikv.storage.engine import StorageEngine, chunk_name
from replikv.storage.fs import DiskFullError, OsFileSystem, VirtualFileSystem
from replikv.storage.inspect import main as inspect_main, verify_directory
from replikv.storage.statefiles import (StateFileError, bump_run_id,
                                        clear_acceptor, load_acceptor,
                                        save_acceptor)
from replikv.types import Command, Opcode, ProposalID, encode_commands

TRACK = 5


class TestVirtualFileSystem:
    def test_unsynced_file_vanishes_on_crash(self):
        fs = VirtualFileSystem()
        f = fs.open_append("a")
        f.write(b"data")
        fs.crash()
        assert not fs.exists("a")

    def test_synced_prefix_survives_torn_crash(self):
        fs = VirtualFileSystem()
        f = fs.open_append("a")
        f.write(b"durable")
        f.sync()
        f.write(b"maybe-lost")
        fs.crash(random.Random(3))
        data = fs.read_whole("a")
        assert data.startswith(b"durable")
        assert b"durable" + b"maybe-lost"[:len(data) - 7] == data

    def test_untorn_crash_drops_whole_tail(self):
        fs = VirtualFileSystem()
        f = fs.open_append("a")
        f.write(b"one")
        f.sync()
        f.write(b"two")
        fs.crash(torn=False)
        assert fs.read_whole("a") == b"one"

    def test_write_whole_is_atomic_and_durable(self):
        fs = VirtualFileSystem()
        fs.write_whole("state", b"v1")
        fs.crash()
        assert fs.read_whole("state") == b"v1"

    def test_capacity_enforced(self):
        fs = VirtualFileSystem(capacity=10)
        f = fs.open_append("a")
        f.write(b"12345")
        with pytest.raises(DiskFullError):
            f.write(b"6789012345")

    def test_rename_replaces(self):
        fs = VirtualFileSystem()
        fs.write_whole("a", b"new")
        fs.write_whole("b", b"old")
        fs.rename("a", "b")
        assert fs.read_whole("b") == b"new"
        assert not fs.exists("a")

    def test_clone_durable_excludes_unsynced(self):
        fs = VirtualFileSystem()
        fs.write_whole("keep", b"yes")
        f = fs.open_append("tail")
        f.write(b"synced")
        f.sync()
        f.write(b"not")
        g = fs.open_append("volatile")
        g.write(b"gone")
        snap = fs.clone_durable()
        assert snap.read_whole("keep") == b"yes"
        assert snap.read_whole("tail") == b"synced"
        assert not snap.exists("volatile")
        # the clone is independent
        snap._files["keep"].data += b"!"
        assert fs.read_whole("keep") == b"yes"


class TestOsFileSystem:
    def test_round_trip(self, tmp_path):
        fs = OsFileSystem(str(tmp_path))
        f = fs.open_append("seg")
        f.write(b"hello ")
        f.write(b"world")
        f.sync()
        f.close()
        assert fs.file_size("seg") == 11
        r = fs.open_read("seg")
        assert r.pread(6, 5) == b"world"
        assert r.size() == 11
        r.close()
        fs.write_whole("whole", b"abc")
        assert fs.read_whole("whole") == b"abc"
        fs.rename("whole", "renamed")
        assert fs.exists("renamed") and not fs.exists("whole")
        assert "seg" in fs.list_names()
        fs.delete("seg")
        fs.delete("seg")  # idempotent
        assert not fs.exists("seg")

    def test_write_whole_leaves_no_temp(self, tmp_path):
        fs = OsFileSystem(str(tmp_path))
        fs.write_whole("toc", b"x" * 100)
        assert fs.list_names() == ["toc"]

    def test_engine_runs_on_real_directory(self, tmp_path):
        fs = OsFileSystem(str(tmp_path))
        engine = StorageEngine(fs, DEFAULT_TUNABLES)
        engine.execute_round(TRACK, 1, encode_commands(
            [Command(Opcode.ADOPT_TABLE, num=1, num2=2)]))
        engine.execute_round(TRACK, 2, encode_commands(
            [Command(Opcode.SET, table_id=1, key=b"k", value=b"v")]))
        engine.commit_track(TRACK)
        engine.serialize_all(engine.tracks[TRACK])
        engine.close()
        reopened = StorageEngine(fs, DEFAULT_TUNABLES)
        assert reopened.tracks[TRACK].last_executed == 2
        from replikv.types import Status
        assert reopened.get(TRACK, 1, b"k") == (Status.OK, b"v")
        reopened.close()


class TestStateFiles:
    def test_acceptor_round_trip(self):
        fs = VirtualFileSystem()
        assert load_acceptor(fs, 3) is None
        rec = AcceptorRecord(paxos_id=9,
                             promised=ProposalID(4, 2, 1),
                             accepted=ProposalID(3, 1, 1),
                             value=b"payload")
        save_acceptor(fs, 3, rec)
        got = load_acceptor(fs, 3)
        assert got == rec
        assert load_acceptor(fs, 4) is None  # per-track files
        clear_acceptor(fs, 3)
        assert load_acceptor(fs, 3) is None

    def test_acceptor_survives_crash(self):
        fs = VirtualFileSystem()
        rec = AcceptorRecord(paxos_id=1, promised=ProposalID(1, 1, 1),
                             accepted=None, value=b"")
        save_acceptor(fs, 1, rec)
        fs.crash(random.Random(0))
        assert load_acceptor(fs, 1) == rec

    def test_corrupt_acceptor_refuses_to_load(self):
        fs = VirtualFileSystem()
        rec = AcceptorRecord(paxos_id=1, promised=None, accepted=None, value=b"")
        save_acceptor(fs, 1, rec)
        data = bytearray(fs.read_whole("paxos.1"))
        data[-1] ^= 0xFF
        fs._files["paxos.1"].data = data
        with pytest.raises(StateFileError):
            load_acceptor(fs, 1)

    def test_run_id_strictly_increases(self):
        fs = VirtualFileSystem()
        assert bump_run_id(fs) == 1
        assert bump_run_id(fs) == 2
        fs.crash()
        assert bump_run_id(fs) == 3


class TestInspection:
    def populate(self, fs):
        engine = StorageEngine(fs, DEFAULT_TUNABLES.override(data_page_size=256))
        engine.execute_round(TRACK, 1, encode_commands(
            [Command(Opcode.ADOPT_TABLE, num=1, num2=2)]))
        engine.execute_round(TRACK, 2, encode_commands(
            [Command(Opcode.SET, table_id=1, key=b"k%d" % i, value=b"v%d" % i)
             for i in range(50)]))
        engine.execute_round(TRACK, 3, encode_commands(
            [Command(Opcode.DELETE, table_id=1, key=b"k7")]))
        engine.serialize_all(engine.tracks[TRACK])
        engine.close()
        return engine

    def test_verify_clean_directory(self):
        fs = VirtualFileSystem()
        self.populate(fs)
        assert verify_directory(fs) == []

    def test_verify_reports_damage_and_orphans(self):
        fs = VirtualFileSystem()
        engine = self.populate(fs)
        victim = chunk_name(next(iter(engine.refs)))
        data = fs._files[victim].data
        data[len(data) // 2] ^= 0x01
        problems = verify_directory(fs)
        assert any(victim in p for p in problems)
        fs2 = VirtualFileSystem()
        self.populate(fs2)
        fs2.write_whole("chunk.9999", b"junk")
        assert any("orphan" in p for p in problems + verify_directory(fs2))

    def test_verify_reports_missing_chunk(self):
        fs = VirtualFileSystem()
        engine = self.populate(fs)
        victim = chunk_name(next(iter(engine.refs)))
        fs.delete(victim)
        assert any("missing" in p for p in verify_directory(fs))

    def test_cli_commands(self, tmp_path, capsys):
        fs = OsFileSystem(str(tmp_path))
        engine = self.populate(fs)
        chunk = chunk_name(next(iter(engine.refs)))
        assert inspect_main([str(tmp_path), "verify"]) == 0
        out = capsys.readouterr().out
        assert "clean" in out
        assert inspect_main([str(tmp_path), "toc"]) == 0
        out = capsys.readouterr().out
        assert f"track {TRACK}" in out
        assert inspect_main([str(tmp_path), "dump-chunk", chunk]) == 0
        out = capsys.readouterr().out
        assert "keys" in out
        assert inspect_main([str(tmp_path), "dump-log"]) == 0
