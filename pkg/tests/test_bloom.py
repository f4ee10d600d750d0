"""Bloom filter calibration: the measured false-positive rate must land
near the configured target, and false negatives must never happen."""

import random

from replikv.storage.bloom import BloomFilter, optimal_bits, optimal_hashes


def test_no_false_negatives_and_fp_rate_near_target():
    n = 100_000
    bf = BloomFilter.for_keys(n, 0.10)
    present = [b"key%d" % i for i in range(n)]
    for key in present:
        bf.add(key)
    for key in present:
        assert bf.may_contain(key)
    absent = [b"absent%d" % i for i in range(n)]
    false_positives = sum(1 for key in absent if bf.may_contain(key))
    rate = false_positives / n
    assert 0.07 <= rate <= 0.13, f"false-positive rate {rate:.4f} outside [0.07, 0.13]"


def test_fp_rate_scales_with_target():
    n = 20_000
    rng = random.Random(7)
    keys = [rng.randbytes(12) for _ in range(n)]
    rates = []
    for target in (0.01, 0.10):
        bf = BloomFilter.for_keys(n, target)
        for key in keys:
            bf.add(key)
        probes = [b"p%d" % i for i in range(n)]
        rates.append(sum(1 for p in probes if bf.may_contain(p)) / n)
    assert rates[0] < rates[1]
    assert rates[0] <= 0.03


def test_sizing_helpers():
    bits = optimal_bits(1000, 0.10)
    assert bits > 1000  # roughly 4.8 bits per key at a 10% target
    assert bits < 8000
    assert optimal_hashes(bits, 1000) >= 1
    # tiny and degenerate inputs still produce a usable filter
    bf = BloomFilter.for_keys(0, 0.10)
    bf.add(b"x")
    assert bf.may_contain(b"x")


def test_empty_filter_rejects_everything():
    bf = BloomFilter.for_keys(1000, 0.10)
    assert not bf.may_contain(b"anything")
