"""Random-hyperplane LSH partitioning with ring replication."""

import threading
import warnings
from dataclasses import dataclass

import numpy as np

from .._binary import Reader, Writer
from .._validation import check_ids, check_matrix

MAGIC = b"SPIP"

_MASK = (1 << 64) - 1


def splitmix64(x):
    """Vectorized splitmix64 finalizer over uint64 arrays."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


@dataclass
class PartitionMap:
    n_nodes: int
    replication: int
    hyperplanes: np.ndarray  # (H, D1)
    seed: int
    doc_ids: np.ndarray
    primary: np.ndarray  # shard (= primary node) per doc

    def __post_init__(self):
        self._shard_of = {int(d): int(s) for d, s in zip(self.doc_ids, self.primary)}
        self._table = None
        self._lock = threading.Lock()  # inserts may race lookups

    def signatures(self, vectors):
        bits = (np.asarray(vectors, dtype=np.float64) @ self.hyperplanes.T) >= 0.0
        weights = np.left_shift(np.uint64(1), np.arange(bits.shape[1], dtype=np.uint64))
        return (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)

    def assign(self, vectors):
        """Primary shard of each level-1 row."""
        sig = self.signatures(np.atleast_2d(vectors))
        hashed = splitmix64(sig ^ np.uint64(self.seed & _MASK))
        return (hashed % np.uint64(self.n_nodes)).astype(np.int64)

    def shard_of(self, doc_id):
        return self._shard_of[int(doc_id)]

    def add(self, doc_id, shard):
        with self._lock:
            self._shard_of[int(doc_id)] = int(shard)
            self._table = None

    def discard(self, doc_id):
        with self._lock:
            self._shard_of.pop(int(doc_id), None)
            self._table = None

    def _lookup_table(self):
        with self._lock:
            if self._table is None:
                n = len(self._shard_of)
                ids = np.fromiter(self._shard_of.keys(), dtype=np.int64, count=n)
                owners = np.fromiter(self._shard_of.values(), dtype=np.int64, count=n)
                order = np.argsort(ids)
                self._table = (ids[order], owners[order])
            return self._table

    def shards_of(self, doc_ids):
        """Owning shard of each id, -1 for ids the map does not know."""
        doc_ids = np.asarray(doc_ids, dtype=np.int64).ravel()
        keys, owners = self._lookup_table()
        if not keys.size:
            return np.full(doc_ids.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(keys, doc_ids), keys.size - 1)
        return np.where(keys[pos] == doc_ids, owners[pos], -1)

    def hosts(self, shard):
        """Nodes holding ``shard``: its primary then ring-successor replicas."""
        return [(shard + j) % self.n_nodes for j in range(self.replication)]

    def shards_on(self, node):
        return sorted({(node - j) % self.n_nodes for j in range(self.replication)})

    def members(self, shard):
        return np.sort(self.doc_ids[self.primary == shard])

    def split(self, doc_ids):
        """Group ``doc_ids`` by owning shard; unknown ids are dropped."""
        doc_ids = np.asarray(doc_ids, dtype=np.int64).ravel()
        owners = self.shards_of(doc_ids)
        return {int(s): doc_ids[owners == s] for s in np.unique(owners[owners >= 0])}

    def sizes(self):
        return np.bincount(self.primary, minlength=self.n_nodes)

    def balance_ratio(self):
        sizes = self.sizes()
        return float(sizes.max() / sizes.min()) if sizes.min() > 0 else float("inf")

    def to_bytes(self):
        """Layout, hyperplanes and current assignments (inserted docs included)."""
        ids, owners = self._lookup_table()
        w = Writer(MAGIC, 1)
        w.pack("IIqHIQ", self.n_nodes, self.replication, self.seed, *self.hyperplanes.shape, ids.size)
        w.array(self.hyperplanes, "f8")
        w.array(ids, "i8")
        w.array(owners, "i8")
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data):
        r = Reader(data, MAGIC)
        n_nodes, replication, seed, n_planes, dim, n = r.unpack("IIqHIQ")
        planes = r.array("f8", (n_planes, dim))
        ids = r.array("i8", (n,))
        owners = r.array("i8", (n,))
        r.done()
        return cls(n_nodes, replication, planes, seed, ids, owners)


def partition(vectors, n_nodes, replication=2, n_planes=16, seed=0, ids=None):
    """Assign every doc a primary node from the LSH signature of its level-1 vector."""
    X = check_matrix(vectors, name="level-1 vectors")
    ids = check_ids(ids, X.shape[0])
    if n_nodes < 1:
        raise ValueError("need at least one node")
    if not 1 <= replication <= n_nodes:
        raise ValueError(f"replication must lie in 1..{n_nodes}")
    if not 1 <= n_planes <= 64:
        raise ValueError("n_planes must lie in 1..64")
    if n_nodes > X.shape[0]:
        warnings.warn(f"{n_nodes} nodes for {X.shape[0]} docs: some shards will be empty",
                      RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    planes = rng.normal(size=(n_planes, X.shape[1]))
    pm = PartitionMap(n_nodes, replication, planes, seed, ids, np.zeros(len(ids), np.int64))
    pm.primary = pm.assign(X)
    pm.__post_init__()
    return pm
