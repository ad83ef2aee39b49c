"""Three-tier LRU cache with promotion on hit and cascading demotion."""

from collections import OrderedDict
from dataclasses import dataclass, field

TIERS = ("T1", "T2", "T3")
_MISS = object()


@dataclass(frozen=True)
class TierSpec:
    tier: str
    capacity: int
    access_cost: float  # simulated ms per hit


DEFAULT_SPECS = (TierSpec("T1", 100, 0.001), TierSpec("T2", 1_000, 0.01), TierSpec("T3", 5_000, 0.1))
DEFAULT_BACKING_COST = 1.0


def check_specs(specs):
    specs = tuple(specs)
    if tuple(s.tier for s in specs) != TIERS:
        raise ValueError(f"expected tiers {TIERS}")
    if any(s.capacity < 1 for s in specs):
        raise ValueError("tier capacities must be positive")
    if not specs[0].access_cost < specs[1].access_cost < specs[2].access_cost:
        raise ValueError("access costs must strictly increase T1 < T2 < T3")
    return specs


@dataclass
class CacheStats:
    hits: list = field(default_factory=lambda: [0, 0, 0])
    misses: int = 0
    evictions: int = 0
    promotions: int = 0
    demotions: list = field(default_factory=lambda: [0, 0])  # T1->T2, T2->T3

    @property
    def lookups(self):
        return sum(self.hits) + self.misses

    @property
    def hit_rate(self):
        return sum(self.hits) / self.lookups if self.lookups else 0.0

    def copy(self):
        return CacheStats(list(self.hits), self.misses, self.evictions, self.promotions,
                          list(self.demotions))


class TierCache:
    """Entries live in exactly one tier; each tier is strict LRU by last access.

    A hit in any tier moves the entry to the front of T1; whatever T1 pushes
    out drops into T2, T2's victim into T3, and T3's victim is evicted.
    """

    def __init__(self, specs=DEFAULT_SPECS):
        self.specs = check_specs(specs)
        self._tiers = [OrderedDict() for _ in TIERS]
        self.stats = CacheStats()

    def __len__(self):
        return sum(len(t) for t in self._tiers)

    def __contains__(self, key):
        return any(key in t for t in self._tiers)

    def tier_of(self, key):
        for name, t in zip(TIERS, self._tiers):
            if key in t:
                return name
        return None

    def keys(self, tier):
        """Keys of ``tier`` from least to most recently used."""
        return list(self._tiers[TIERS.index(tier)])

    def _insert_front(self, key, value):
        cascade = 0
        self._tiers[0][key] = value
        for i in range(len(self._tiers)):
            tier = self._tiers[i]
            if len(tier) <= self.specs[i].capacity:
                break
            victim, v = tier.popitem(last=False)
            if i + 1 < len(self._tiers):
                self._tiers[i + 1][victim] = v
                self.stats.demotions[i] += 1
            else:
                self.stats.evictions += 1
                cascade += 1
        return cascade

    def get(self, key, default=None):
        for i, tier in enumerate(self._tiers):
            value = tier.pop(key, _MISS)
            if value is _MISS:
                continue
            self.stats.hits[i] += 1
            if i == 0:
                tier[key] = value
            else:
                self.stats.promotions += 1
                self._insert_front(key, value)
            return value
        self.stats.misses += 1
        return default

    def put(self, key, value):
        """Insert or refresh ``key`` at the front of T1; returns evictions performed."""
        for tier in self._tiers:
            tier.pop(key, None)
        return self._insert_front(key, value)

    def snapshot(self):
        return self.stats.copy()


def simulated_cost(stats, specs=DEFAULT_SPECS, backing_cost=DEFAULT_BACKING_COST):
    """Milliseconds spent: hits priced per tier, misses at the backing store."""
    specs = check_specs(specs)
    return sum(h * s.access_cost for h, s in zip(stats.hits, specs)) + stats.misses * backing_cost
