"""Bloom filter over chunk keys.

Sized from the target false-positive rate; probes use double hashing
derived from one 64-bit keyed hash so the filter is cheap to build and
stable across processes (Python's own hash() is salted per run and
must not leak in here).
"""

from __future__ import annotations

import hashlib
import math

from ..codec import u64_fmt


def _hash64(key: bytes) -> int:
    return u64_fmt.unpack(hashlib.blake2b(key, digest_size=8).digest())[0]


def optimal_bits(num_keys: int, fp_rate: float) -> int:
    if num_keys == 0:
        return 8
    bits = -num_keys * math.log(fp_rate) / (math.log(2) ** 2)
    return max(8, int(bits))


def optimal_hashes(bits: int, num_keys: int) -> int:
    if num_keys == 0:
        return 1
    k = round(bits / num_keys * math.log(2))
    return max(1, k)


class BloomFilter:
    def __init__(self, bits: int, num_hashes: int, data: bytearray | None = None) -> None:
        self.bits = bits
        self.num_hashes = num_hashes
        self.data = data if data is not None else bytearray((bits + 7) // 8)

    @classmethod
    def for_keys(cls, num_keys: int, fp_rate: float) -> "BloomFilter":
        bits = optimal_bits(num_keys, fp_rate)
        return cls(bits, optimal_hashes(bits, num_keys))

    def _probes(self, key: bytes):
        h = _hash64(key)
        h1 = h & 0xFFFFFFFF
        h2 = (h >> 32) | 1
        for i in range(self.num_hashes):
            yield (h1 + i * h2) % self.bits

    def add(self, key: bytes) -> None:
        for bit in self._probes(key):
            self.data[bit >> 3] |= 1 << (bit & 7)

    def may_contain(self, key: bytes) -> bool:
        for bit in self._probes(key):
            if not self.data[bit >> 3] & 1 << (bit & 7):
                return False
        return True
