"""Filesystem access used by the storage engine.

Two implementations share one interface: OsFileSystem maps to a real
directory, VirtualFileSystem keeps everything in memory and models
crash durability precisely: on crash, bytes appended after the last
sync are kept only as an arbitrary prefix (torn at byte granularity),
files created but never synced may vanish, and a rename is atomic.

The engine treats chunk files as immutable once finalized; the virtual
implementation enforces that so any rewrite is caught in tests.
"""

from __future__ import annotations

import os
import random


class DiskFullError(OSError):
    """Raised by writes when the filesystem has no room left."""


class WritableFile:
    def write(self, data: bytes) -> None:
        raise NotImplementedError

    def sync(self) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def size(self) -> int:
        raise NotImplementedError


class ReadableFile:
    def pread(self, offset: int, length: int) -> bytes:
        raise NotImplementedError

    def size(self) -> int:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class FileSystem:
    """Flat namespace: the engine uses plain names, no directories."""

    def open_append(self, name: str) -> WritableFile:
        raise NotImplementedError

    def open_read(self, name: str) -> ReadableFile:
        raise NotImplementedError

    def read_whole(self, name: str) -> bytes:
        raise NotImplementedError

    def write_whole(self, name: str, data: bytes) -> None:
        """Create or truncate, write, sync."""
        raise NotImplementedError

    def rename(self, src: str, dst: str) -> None:
        raise NotImplementedError

    def delete(self, name: str) -> None:
        raise NotImplementedError

    def exists(self, name: str) -> bool:
        raise NotImplementedError

    def list_names(self) -> list[str]:
        raise NotImplementedError

    def file_size(self, name: str) -> int:
        raise NotImplementedError

    def mark_immutable(self, name: str) -> None:
        """Finalized files must never change; virtual fs enforces this."""

    # instrumentation for tests and the simulator
    def sync_count(self) -> int:
        return 0

    def write_count(self) -> int:
        return 0


class _VFile:
    __slots__ = ("data", "synced_len", "durable", "immutable")

    def __init__(self) -> None:
        self.data = bytearray()
        self.synced_len = 0
        self.durable = False  # file itself survives crash (metadata synced)
        self.immutable = False


class _VWritable(WritableFile):
    def __init__(self, fs: "VirtualFileSystem", name: str) -> None:
        self._fs = fs
        self._name = name
        self._open = True

    def write(self, data: bytes) -> None:
        assert self._open
        self._fs._append(self._name, data)

    def sync(self) -> None:
        assert self._open
        self._fs._sync(self._name)

    def close(self) -> None:
        self._open = False

    def size(self) -> int:
        return len(self._fs._files[self._name].data)


class _VReadable(ReadableFile):
    def __init__(self, fs: "VirtualFileSystem", name: str) -> None:
        self._fs = fs
        self._name = name

    def pread(self, offset: int, length: int) -> bytes:
        self._fs.read_ops += 1
        data = self._fs._files[self._name].data
        return bytes(data[offset:offset + length])

    def size(self) -> int:
        return len(self._fs._files[self._name].data)

    def close(self) -> None:
        pass


class VirtualFileSystem(FileSystem):
    def __init__(self, capacity: int | None = None) -> None:
        self._files: dict[str, _VFile] = {}
        self.capacity = capacity
        self.syncs = 0
        self.writes = 0
        self.read_ops = 0
        self.crashes = 0

    # -- internals -------------------------------------------------------

    def _used(self) -> int:
        return sum(len(f.data) for f in self._files.values())

    def _append(self, name: str, data: bytes) -> None:
        if self.capacity is not None and self._used() + len(data) > self.capacity:
            raise DiskFullError(f"capacity {self.capacity} exceeded")
        f = self._files[name]
        if f.immutable:
            raise AssertionError(f"write to finalized file {name}")
        f.data += data
        self.writes += 1

    def _sync(self, name: str) -> None:
        f = self._files[name]
        f.synced_len = len(f.data)
        f.durable = True
        self.syncs += 1

    # -- FileSystem ------------------------------------------------------

    def open_append(self, name: str) -> WritableFile:
        if name not in self._files:
            self._files[name] = _VFile()
        return _VWritable(self, name)

    def open_read(self, name: str) -> ReadableFile:
        if name not in self._files:
            raise FileNotFoundError(name)
        return _VReadable(self, name)

    def read_whole(self, name: str) -> bytes:
        if name not in self._files:
            raise FileNotFoundError(name)
        self.read_ops += 1
        return bytes(self._files[name].data)

    def write_whole(self, name: str, data: bytes) -> None:
        if self.capacity is not None:
            current = len(self._files[name].data) if name in self._files else 0
            if self._used() - current + len(data) > self.capacity:
                raise DiskFullError(f"capacity {self.capacity} exceeded")
        old = self._files.get(name)
        if old is not None and old.immutable:
            raise AssertionError(f"rewrite of finalized file {name}")
        f = _VFile()
        f.data = bytearray(data)
        f.synced_len = len(data)
        f.durable = True
        self._files[name] = f
        self.writes += 1
        self.syncs += 1

    def rename(self, src: str, dst: str) -> None:
        if src not in self._files:
            raise FileNotFoundError(src)
        self._files[dst] = self._files.pop(src)

    def delete(self, name: str) -> None:
        if name in self._files:
            del self._files[name]

    def exists(self, name: str) -> bool:
        return name in self._files

    def list_names(self) -> list[str]:
        return sorted(self._files)

    def file_size(self, name: str) -> int:
        return len(self._files[name].data)

    def mark_immutable(self, name: str) -> None:
        self._files[name].immutable = True

    def sync_count(self) -> int:
        return self.syncs

    def write_count(self) -> int:
        return self.writes

    # -- crash model -----------------------------------------------------

    def crash(self, rng: random.Random | None = None, torn: bool = True) -> None:
        """Lose everything volatile, optionally tearing unsynced appends.

        With torn=True each file keeps its synced prefix plus a
        rng-chosen number of the unsynced bytes; with torn=False
        unsynced bytes are dropped whole.
        """
        rng = rng or random.Random(0)
        self.crashes += 1
        for name in list(self._files):
            f = self._files[name]
            if not f.durable:
                del self._files[name]
                continue
            if len(f.data) > f.synced_len:
                keep = f.synced_len
                if torn:
                    keep += rng.randrange(0, len(f.data) - f.synced_len + 1)
                del f.data[keep:]
                f.synced_len = len(f.data)

    def clone_durable(self) -> "VirtualFileSystem":
        """Durable snapshot as a new filesystem (for dump comparisons)."""
        out = VirtualFileSystem(capacity=self.capacity)
        for name, f in self._files.items():
            if not f.durable:
                continue
            g = _VFile()
            g.data = bytearray(f.data[:f.synced_len])
            g.synced_len = f.synced_len
            g.durable = True
            out._files[name] = g
        return out


class _OsWritable(WritableFile):
    def __init__(self, path: str) -> None:
        self._f = open(path, "ab")

    def write(self, data: bytes) -> None:
        self._f.write(data)

    def sync(self) -> None:
        self._f.flush()
        os.fsync(self._f.fileno())

    def close(self) -> None:
        self._f.close()

    def size(self) -> int:
        self._f.flush()
        return self._f.tell()


class _OsReadable(ReadableFile):
    def __init__(self, path: str) -> None:
        self._f = open(path, "rb")

    def pread(self, offset: int, length: int) -> bytes:
        return os.pread(self._f.fileno(), length, offset)

    def size(self) -> int:
        return os.fstat(self._f.fileno()).st_size

    def close(self) -> None:
        self._f.close()


class OsFileSystem(FileSystem):
    def __init__(self, root: str) -> None:
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def open_append(self, name: str) -> WritableFile:
        return _OsWritable(self._path(name))

    def open_read(self, name: str) -> ReadableFile:
        return _OsReadable(self._path(name))

    def read_whole(self, name: str) -> bytes:
        with open(self._path(name), "rb") as f:
            return f.read()

    def write_whole(self, name: str, data: bytes) -> None:
        # temp-and-rename so a crash never leaves a partial file behind
        tmp = self._path(name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        self.rename(name + ".tmp", name)

    def rename(self, src: str, dst: str) -> None:
        os.rename(self._path(src), self._path(dst))
        dirfd = os.open(self.root, os.O_RDONLY)
        try:
            os.fsync(dirfd)
        finally:
            os.close(dirfd)

    def delete(self, name: str) -> None:
        try:
            os.unlink(self._path(name))
        except FileNotFoundError:
            pass

    def exists(self, name: str) -> bool:
        return os.path.exists(self._path(name))

    def list_names(self) -> list[str]:
        return sorted(os.listdir(self.root))

    def file_size(self, name: str) -> int:
        return os.stat(self._path(name)).st_size
