import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spi.cache.tiers import CacheStats, TierCache, TierSpec, simulated_cost


def specs(c1, c2, c3):
    return (TierSpec("T1", c1, 0.001), TierSpec("T2", c2, 0.01), TierSpec("T3", c3, 0.1))


def access(cache, key):
    if cache.get(key) is None:
        cache.put(key, key)


class StackReference:
    """One recency list; the tier of a hit is given by the key's recency rank."""

    def __init__(self, caps):
        self.bounds = np.cumsum(caps)
        self.stack = []
        self.hits = [0, 0, 0]
        self.misses = 0

    def access(self, key):
        if key in self.stack:
            rank = self.stack.index(key)
            self.hits[int(np.searchsorted(self.bounds, rank, side="right"))] += 1
            self.stack.pop(rank)
        else:
            self.misses += 1
        self.stack.insert(0, key)
        del self.stack[self.bounds[-1]:]


def test_capacity_one_cascade():
    c = TierCache(specs(1, 1, 1))
    for key in "abcd":
        c.put(key, key)
    assert (c.keys("T1"), c.keys("T2"), c.keys("T3")) == (["d"], ["c"], ["b"])
    assert "a" not in c and c.stats.evictions == 1
    assert c.get("b") == "b"
    assert (c.keys("T1"), c.keys("T2"), c.keys("T3")) == (["b"], ["d"], ["c"])
    assert c.stats.hits == [0, 0, 1] and c.stats.promotions == 1


def test_empty_cache_misses():
    c = TierCache()
    assert c.get("x") is None and c.stats.misses == 1 and c.stats.hit_rate == 0.0


def test_spec_validation():
    with pytest.raises(ValueError):
        TierCache(specs(0, 1, 1))
    with pytest.raises(ValueError):
        TierCache((TierSpec("T1", 1, 0.1), TierSpec("T2", 1, 0.01), TierSpec("T3", 1, 1.0)))


def test_zipf_hit_rate_matches_reference():
    rng = np.random.default_rng(0)
    p = 1.0 / np.arange(1, 10_001)
    keys = rng.choice(10_000, size=20_000, p=p / p.sum())
    cache = TierCache(specs(100, 1000, 5000))
    ref = StackReference((100, 1000, 5000))
    for k in keys.tolist():
        access(cache, k)
        ref.access(k)
    ref_rate = sum(ref.hits) / len(keys)
    assert abs(cache.stats.hit_rate - ref_rate) <= 0.03
    for got, want in zip(cache.stats.hits, ref.hits):
        assert abs(got - want) / len(keys) <= 0.03


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 30), max_size=300), st.integers(1, 5), st.integers(1, 5),
       st.integers(1, 5))
def test_matches_recency_oracle(seq, c1, c2, c3):
    cache, ref = TierCache(specs(c1, c2, c3)), StackReference((c1, c2, c3))
    for k in seq:
        access(cache, k)
        ref.access(k)
    assert cache.stats.hits == ref.hits and cache.stats.misses == ref.misses
    order = cache.keys("T3") + cache.keys("T2") + cache.keys("T1")
    assert order[::-1] == ref.stack


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 50), max_size=400))
def test_capacities_hold_and_tiers_are_disjoint(seq):
    c = TierCache(specs(2, 3, 4))
    for k in seq:
        access(c, k)
        sets = [set(c.keys(t)) for t in ("T1", "T2", "T3")]
        assert [len(s) for s in sets] <= [2, 3, 4] and all(len(s) <= m for s, m in zip(sets, (2, 3, 4)))
        assert not (sets[0] & sets[1] or sets[1] & sets[2] or sets[0] & sets[2])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=300), st.integers(1, 4))
def test_bigger_cache_never_hits_less(seq, extra):
    small, big = TierCache(specs(1, 2, 3)), TierCache(specs(1 + extra, 2 + extra, 3 + extra))
    for k in seq:
        access(small, k)
        access(big, k)
    assert sum(big.stats.hits) >= sum(small.stats.hits)


def test_simulated_cost_examples():
    s = specs(1, 1, 1)
    assert simulated_cost(CacheStats([0, 0, 0], 0), s) == 0.0
    assert simulated_cost(CacheStats([2, 1, 1], 3), s, backing_cost=1.0) == pytest.approx(
        2 * 0.001 + 0.01 + 0.1 + 3.0)
