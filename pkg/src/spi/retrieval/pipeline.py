"""Coarse-to-fine retrieval over per-level indices."""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .._binary import Reader, Writer
from .._validation import check_ids, check_matrix, check_vector
from ..controller.depth import DepthController
from ..exceptions import DimensionMismatchError
from ..index.level_index import IndexSpec, LevelIndex, SearchHit
from ..pyramid.encoder import ProgressiveEncoder, default_dims
from .aggregate import aggregate
from .trace import LevelTrace, RetrievalTrace

DEFAULT_COARSE = IndexSpec("IVF", n_lists=64, n_probe=4)
DEFAULT_REFINE = IndexSpec("Flat")
SHARD_MAGIC = b"SPIS"


def _fit_spec(spec, n):
    """Shrink the cell count for partitions smaller than ``n_lists``."""
    if spec.backend == "Flat" or n >= spec.n_lists:
        return spec
    if n == 0:
        return IndexSpec("Flat")
    n_lists = max(1, n)
    return replace(spec, n_lists=n_lists, n_probe=min(spec.n_probe, n_lists))


class Shard:
    """One partition: a :class:`LevelIndex` per pyramid level over the same docs."""

    def __init__(self, shard_id, indexes):
        self.shard_id = int(shard_id)
        self.indexes = list(indexes)

    @classmethod
    def build(cls, shard_id, levels, ids, coarse=DEFAULT_COARSE, refine=DEFAULT_REFINE, seed=0):
        ids = check_ids(ids, levels[0].shape[0])
        indexes = []
        for lv, vectors in enumerate(levels, start=1):
            spec = coarse if lv == 1 else refine
            spec = _fit_spec(spec, vectors.shape[0])
            indexes.append(LevelIndex.build(vectors, ids, spec, level=lv, seed=seed + lv))
        return cls(shard_id, indexes)

    @property
    def n_levels(self):
        return len(self.indexes)

    @property
    def dims(self):
        return tuple(ix.dim for ix in self.indexes)

    def __len__(self):
        return len(self.indexes[0])

    def __contains__(self, doc_id):
        return doc_id in self.indexes[0]

    def search(self, level, query, k, restrict=None):
        return self.indexes[level - 1].search(query, k, restrict)

    def insert(self, doc_id, level_vectors):
        if doc_id in self.indexes[0]:
            raise ValueError(f"doc_id {doc_id} is already indexed")
        # finest first: a doc becomes reachable only once level 1 publishes it
        for ix, v in reversed(list(zip(self.indexes, level_vectors))):
            ix.insert(doc_id, v)

    def remove(self, doc_id):
        if doc_id not in self.indexes[0]:
            raise KeyError(f"doc_id {doc_id} is not indexed")
        for ix in self.indexes:
            ix.remove(doc_id)

    def doc_ids(self):
        return np.sort(self.indexes[0].doc_ids())

    def level_vectors(self, level, doc_ids=None):
        ix = self.indexes[level - 1]
        ids = self.doc_ids() if doc_ids is None else np.asarray(doc_ids, dtype=np.int64)
        return ids, ix.vectors_for(ids)

    def nbytes(self):
        return sum(ix.nbytes() for ix in self.indexes)

    def to_bytes(self):
        w = Writer(SHARD_MAGIC, 1)
        w.pack("IH", self.shard_id, self.n_levels)
        for ix in self.indexes:
            blob = ix.to_bytes()
            w.pack("Q", len(blob))
            w.raw(blob)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data):
        r = Reader(data, SHARD_MAGIC)
        shard_id, n_levels = r.unpack("IH")
        indexes = []
        for _ in range(n_levels):
            (size,) = r.unpack("Q")
            indexes.append(LevelIndex.from_bytes(r.raw(size)))
        r.done()
        return cls(shard_id, indexes)


@dataclass
class Gathered:
    """Outcome of one scatter-gather round."""
    partials: list
    node_counts: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    shards: list = field(default_factory=list)  # shard id of each partial


class LocalSearcher:
    """Single-partition searcher: the non-distributed engine."""

    n_partitions = 1

    def __init__(self, shard):
        self.shard = shard

    @property
    def dims(self):
        return self.shard.dims

    def search_level(self, level, query, per_node_k, restrict=None, shards=None):
        if shards is not None and 0 not in shards:
            return Gathered([], {}, [], [])
        res = self.shard.search(level, query, per_node_k, restrict)
        return Gathered([res], {0: len(res)}, [], [0])


@dataclass
class RetrievalResult:
    ids: np.ndarray
    scores: np.ndarray
    level: int
    trace: RetrievalTrace

    @property
    def hits(self):
        return [SearchHit(int(i), float(s), self.level) for i, s in zip(self.ids, self.scores)]


def encode_query(encoder, query):
    q = check_vector(query, name="query")
    if q.shape[0] != encoder.source_dim_:
        raise DimensionMismatchError("query", encoder.source_dim_, q.shape[0])
    return [v[0].astype(np.float64) for v in encoder.encode(q[None, :])]


def _truncated(got, per_node, cand, budget):
    """Shards whose cut-off reply may hide docs that belong in the merged top ``budget``.

    Anything a shard withheld ranks after its last hit, so only a shard
    whose last hit ranks strictly ahead of the merged cutoff can be hiding
    a winner.
    """
    full = len(cand) >= budget
    out = []
    for s, p in zip(got.shards, got.partials):
        if len(p.ids) < per_node:
            continue
        tail_score, tail_id = p.scores[-1], p.ids[-1]
        if not full or tail_score > cand.scores[-1] or (
                tail_score == cand.scores[-1] and tail_id < cand.ids[-1]):
            out.append(s)
    return out


def _top_up(searcher, level, query, budget, restrict, got, shards):
    extra = searcher.search_level(level, query, budget, restrict, shards=shards)
    redo = set(extra.shards)
    keep = [(s, p) for s, p in zip(got.shards, got.partials) if s not in redo]
    counts = dict(got.node_counts)
    for node, n in extra.node_counts.items():
        counts[node] = counts.get(node, 0) + n
    partials = [p for _, p in keep] + extra.partials
    scored = [p for s, p in zip(got.shards, got.partials) if s in redo]
    return Gathered(partials, counts, sorted(set(got.missing) | set(extra.missing)),
                    [s for s, _ in keep] + extra.shards), scored


def retrieve(query, encoder, planner, searcher, k=10, plan=None, clock=time.perf_counter):
    """Run one coarse-to-fine query.

    Level 1 searches every partition with ``ceil(N_1 / N)`` hits each;
    level ``l`` re-scores only the previous level's candidates. A partition
    whose reply was cut at its share while its last hit still reaches the
    merged cutoff is asked again for the full budget, so the merged
    candidates equal a single-partition search over the same vectors.
    Returns a :class:`RetrievalResult` with the top ``k`` at the final level.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    qlevels = encode_query(encoder, query)
    if tuple(len(q) for q in qlevels) != tuple(searcher.dims):
        raise DimensionMismatchError("encoder levels", tuple(searcher.dims),
                                     tuple(len(q) for q in qlevels))
    if plan is None:
        plan = planner.plan(qlevels[0].astype(np.float32), k)
    if plan.final > len(qlevels):
        raise ValueError(f"plan depth {plan.final} exceeds the {len(qlevels)} indexed levels")
    n_parts = searcher.n_partitions
    trace = RetrievalTrace(plan.predicted, plan.sigma, plan.final)
    cand = None
    for lv in range(1, plan.final + 1):
        budget = int(plan.budgets[lv - 1])
        per_node = math.ceil(budget / n_parts)
        restrict = None if cand is None else cand.ids
        t0 = clock()
        got = searcher.search_level(lv, qlevels[lv - 1], per_node, restrict)
        cand = aggregate(got.partials, budget, lv)
        spent, again = [], []
        if per_node < budget:
            again = _truncated(got, per_node, cand, budget)
            if again:
                got, spent = _top_up(searcher, lv, qlevels[lv - 1], budget, restrict, got, again)
                cand = aggregate(got.partials, budget, lv)
        work = got.partials + spent
        trace.levels.append(LevelTrace(
            level=lv, budget=budget, per_node_budget=per_node, n_candidates=len(cand),
            n_scored=int(sum(p.n_scored for p in work)),
            n_centroids=int(sum(p.n_centroids for p in work)),
            node_counts=dict(got.node_counts), missing_nodes=list(got.missing),
            topped_up=list(again), seconds=clock() - t0))
    return RetrievalResult(cand.ids[:k], cand.scores[:k], plan.final, trace)


class SemanticPyramidIndex(BaseEstimator):
    """Multi-resolution nearest-neighbour index.

    ``fit`` trains (or reuses) a :class:`ProgressiveEncoder`, encodes the
    corpus into its pyramid and builds one index per level: ``coarse_index``
    at level 1, ``refine_index`` above it. Queries run through
    :func:`retrieve` with depths chosen by ``controller`` (full depth when
    the controller is None or untrained).
    """

    def __init__(self, encoder=None, level_dims=None, coarse_index=None, refine_index=None,
                 controller=None, n_neighbors=10, random_state=0):
        self.encoder = encoder
        self.level_dims = level_dims
        self.coarse_index = coarse_index
        self.refine_index = refine_index
        self.controller = controller
        self.n_neighbors = n_neighbors
        self.random_state = random_state

    def fit(self, X, y=None, ids=None):
        X = check_matrix(X, name="corpus")
        ids = check_ids(ids, X.shape[0])
        enc = self.encoder
        if enc is None or not hasattr(enc, "params_"):
            if enc is None:
                dims = self.level_dims or default_dims(X.shape[1])
                enc = ProgressiveEncoder(level_dims=dims, random_state=self.random_state)
            enc = clone(enc).fit(X)
        self.encoder_ = enc
        levels = enc.encode(X)
        shard = Shard.build(0, levels, ids, self.coarse_index or DEFAULT_COARSE,
                            self.refine_index or DEFAULT_REFINE, seed=self.random_state)
        self.searcher_ = LocalSearcher(shard)
        self.controller_ = self.controller or DepthController(n_levels=enc.n_levels_)
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def n_levels_(self):
        return self.encoder_.n_levels_

    def set_controller(self, controller):
        check_is_fitted(self, "searcher_")
        self.controller_ = controller
        return self

    def retrieve(self, query, k=None, plan=None):
        check_is_fitted(self, "searcher_")
        return retrieve(query, self.encoder_, self.controller_, self.searcher_,
                        k or self.n_neighbors, plan)

    def kneighbors(self, X, n_neighbors=None, return_distance=True):
        """Top hits per row as ``(scores, ids)``; short rows are padded with -1 / nan."""
        X = check_matrix(X, dim=self.n_features_in_, name="queries")
        k = n_neighbors or self.n_neighbors
        ids = np.full((X.shape[0], k), -1, dtype=np.int64)
        scores = np.full((X.shape[0], k), np.nan)
        for i, q in enumerate(X):
            res = self.retrieve(q, k)
            ids[i, :len(res.ids)] = res.ids
            scores[i, :len(res.ids)] = res.scores
        return (scores, ids) if return_distance else ids

    def insert(self, doc_id, vector):
        check_is_fitted(self, "searcher_")
        v = check_vector(vector, dim=self.n_features_in_, name="vector")
        levels = [e[0] for e in self.encoder_.encode(v[None, :])]
        self.searcher_.shard.insert(int(doc_id), levels)
        return self

    def remove(self, doc_id):
        check_is_fitted(self, "searcher_")
        self.searcher_.shard.remove(int(doc_id))
        return self

    def level_vectors(self, level):
        """``(ids, vectors)`` of every indexed doc at ``level``, sorted by id."""
        check_is_fitted(self, "searcher_")
        return self.searcher_.shard.level_vectors(level)
