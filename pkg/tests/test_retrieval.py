import json
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from spi.bench.oracle import oracle_batch, oracle_topk
from spi.controller.depth import (DepthController, FixedDepthController, RandomDepthController,
                                  fixed_plan)
from spi.exceptions import DimensionMismatchError
from spi.index.level_index import IndexSpec
from spi.pyramid.encoder import ProgressiveEncoder
from spi.retrieval.aggregate import aggregate
from spi.retrieval.pipeline import LocalSearcher, SemanticPyramidIndex, Shard, retrieve
from spi.retrieval.trace import hit_attribution, write_jsonl

from conftest import unit_rows

FLAT = IndexSpec("Flat")
COARSE = IndexSpec("IVF", n_lists=16, n_probe=4)


def naive_aggregate(partials, budget):
    best = {}
    for ids, scores in partials:
        for d, s in zip(ids, scores):
            best[int(d)] = max(best.get(int(d), -np.inf), float(s))
    items = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:budget]
    return [d for d, _ in items], [s for _, s in items]


def test_aggregate_disjoint_partials():
    c = aggregate([([1, 2], [0.9, 0.5]), ([3], [0.7])], budget=2)
    assert c.ids.tolist() == [1, 3] and c.scores.tolist() == [0.9, 0.7] and len(c) == 2


def test_aggregate_keeps_max_score_once():
    c = aggregate([([4], [0.8]), ([4, 5], [0.9, 0.1])], budget=5)
    assert c.ids.tolist() == [4, 5] and c.scores.tolist() == [0.9, 0.1]
    assert len(aggregate([], 3)) == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.tuples(st.integers(0, 30), st.integers(-4, 4)), max_size=15), max_size=6),
       st.integers(1, 40))
def test_aggregate_matches_union_then_sort(parts, budget):
    partials = [([d for d, _ in p], [s / 4 for _, s in p]) for p in parts]
    c = aggregate(partials, budget)
    want_ids, want_scores = naive_aggregate(partials, budget)
    assert c.ids.tolist() == want_ids and c.scores.tolist() == want_scores
    assert len(set(c.ids.tolist())) == len(c.ids) <= budget


@pytest.fixture(scope="module")
def system(small_encoder, small_corpus):
    return SemanticPyramidIndex(encoder=small_encoder, coarse_index=COARSE).fit(
        small_corpus.vectors, ids=small_corpus.ids)


@pytest.fixture(scope="module")
def truth(system, small_encoder, small_queries):
    ids, V = system.level_vectors(3)
    return oracle_batch(V, small_encoder.encode(small_queries.vectors)[2], 10, ids)[0]


def test_single_level_equals_flat_scan(rng):
    X = unit_rows(rng, 300, 8)
    enc = ProgressiveEncoder(level_dims=(8,), epochs=0).fit(X)
    sys1 = SemanticPyramidIndex(encoder=enc, coarse_index=FLAT).fit(X)
    e1 = enc.encode(X)[0]
    for q in unit_rows(rng, 10, 8):
        res = sys1.retrieve(q, 5)
        assert res.level == 1
        want = oracle_topk(e1, enc.encode(q[None, :])[0][0], 5)
        assert res.ids.tolist() == want[0].tolist()


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.integers(30, 600))
def test_exactness_escape_hatch(seed, n):
    r = np.random.default_rng(seed)
    X = unit_rows(r, n, 16)
    enc = ProgressiveEncoder(level_dims=(4, 8, 16), fine_blend=1.0, epochs=1, random_state=seed).fit(X)
    shard = Shard.build(0, enc.encode(X), np.arange(n), FLAT, FLAT)
    searcher = LocalSearcher(shard)
    plan = fixed_plan(3, 10, budgets=(n, n, n))
    for q in unit_rows(r, 5, 16):
        res = retrieve(q, enc, None, searcher, 10, plan)
        want_ids, want_scores = oracle_topk(X, q, 10)
        assert res.ids.tolist() == want_ids.tolist()


def test_final_results_come_from_the_coarse_union(system, small_queries):
    for q in small_queries.vectors[:30]:
        res = system.retrieve(q, 10)
        budgets = fixed_plan(res.level, 10).budgets
        coarse = system.retrieve(q, budgets[0], fixed_plan(1, budgets[0], budgets[:1]))
        assert set(res.ids.tolist()) <= set(coarse.ids.tolist())


def test_budget_discipline_in_trace(system, small_queries):
    for q in small_queries.vectors[:30]:
        res = system.retrieve(q, 10)
        for lv in res.trace.levels:
            assert lv.n_candidates <= lv.budget
            assert lv.per_node_budget == lv.budget  # one partition
        # each refinement level scores exactly the previous level's candidates
        scored = [lv.n_scored for lv in res.trace.levels]
        assert scored[1:] == [lv.n_candidates for lv in res.trace.levels[:-1]]


def test_recall_is_monotone_in_depth_on_default_corpus():
    from spi.bench.corpus import make_corpus, make_queries
    corpus = make_corpus()
    encoder = ProgressiveEncoder().fit(corpus.vectors)
    system = SemanticPyramidIndex(encoder=encoder).fit(corpus.vectors)
    qs = make_queries(corpus, n_queries=500, seed=44).vectors
    ids, V = system.level_vectors(3)
    truth = oracle_batch(V, encoder.encode(qs)[2], 10, ids)[0]
    means = []
    for depth in (1, 2, 3):
        plan = fixed_plan(depth, 10)
        got = [system.retrieve(q, 10, plan).ids for q in qs]
        means.append(np.mean([len(set(g.tolist()) & set(t.tolist())) / 10 for g, t in zip(got, truth)]))
    assert means[0] <= means[1] + 0.01 and means[1] <= means[2] + 0.01


def test_fixed_depth_attribution(system, small_queries):
    traces = [system.retrieve(q, 10).trace for q in small_queries.vectors[:20]]
    assert hit_attribution(traces, 3).tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        hit_attribution([])


def test_random_depth_attribution_is_uniform(system, small_corpus):
    from spi.bench.corpus import make_queries
    qs = make_queries(small_corpus, n_queries=1000, seed=8).vectors
    system_random = clone(system).set_params()
    rnd = RandomDepthController(3, seed=1)
    traces = [retrieve(q, system.encoder_, rnd, system.searcher_, 10).trace for q in qs]
    frac = hit_attribution(traces, 3)
    assert frac.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(frac, 1 / 3, atol=0.05)
    assert system_random.get_params()["n_neighbors"] == 10


def test_trained_controller_stops_early_more_often(system, small_queries, small_encoder, truth):
    from spi.controller.labeling import label_queries
    lab = label_queries(system, small_queries.vectors, truth)
    ctrl = DepthController(n_levels=3, min_class_count=1).fit(lab.coarse, lab.labels)
    adaptive = [retrieve(q, small_encoder, ctrl, system.searcher_, 10).trace for q in small_queries.vectors]
    fixed = [system.retrieve(q, 10).trace for q in small_queries.vectors]
    assert hit_attribution(adaptive, 3)[0] > hit_attribution(fixed, 3)[0]


def test_trace_accounting_and_json(system, small_queries, tmp_path):
    res = system.retrieve(small_queries.vectors[0], 10)
    t = res.trace
    assert t.cost == sum(lv.n_scored + lv.n_centroids for lv in t.levels)
    assert all(lv.seconds >= 0 for lv in t.levels)
    d = json.loads(t.to_json(timings=False))
    assert "seconds" not in d["levels"][0] and d["final"] == 3
    write_jsonl([t, t], tmp_path / "t.jsonl")
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 2
    assert [h.doc_id for h in res.hits] == res.ids.tolist()


def test_dimension_mismatch_fails_fast(system, rng):
    with pytest.raises(DimensionMismatchError):
        system.retrieve(np.ones(10), 5)
    other = ProgressiveEncoder(level_dims=(8, 16, 64), epochs=0).fit(unit_rows(rng, 200, 64))
    with pytest.raises(DimensionMismatchError):
        retrieve(unit_rows(rng, 1, 64)[0], other, FixedDepthController(3), system.searcher_, 5)
    with pytest.raises(ValueError):
        retrieve(unit_rows(rng, 1, 64)[0], system.encoder_, None, system.searcher_, 0)


def test_kneighbors_insert_remove(small_encoder, small_corpus, rng):
    X = small_corpus.vectors[:500]
    est = SemanticPyramidIndex(encoder=small_encoder, coarse_index=COARSE, n_neighbors=4).fit(X)
    scores, ids = est.kneighbors(X[:3])
    assert ids.shape == (3, 4) and ids[:, 0].tolist() == [0, 1, 2]
    assert est.kneighbors(X[:2], return_distance=False).shape == (2, 4)
    v = unit_rows(rng, 1, 64)[0]
    est.insert(9999, v)
    assert est.retrieve(v, 1).ids[0] == 9999
    est.remove(9999)
    assert 9999 not in est.retrieve(v, 20).ids


def test_fit_trains_an_encoder_when_none_is_given(rng):
    X = unit_rows(rng, 300, 16)
    est = SemanticPyramidIndex(level_dims=(4, 8, 16), coarse_index=IndexSpec("IVF", n_lists=4, n_probe=2),
                               encoder=ProgressiveEncoder(level_dims=(4, 8, 16), epochs=1)).fit(X)
    assert est.n_levels_ == 3 and est.encoder is not est.encoder_
    assert len(est.retrieve(X[0], 3).ids) == 3


def test_shard_round_trip(system):
    shard = system.searcher_.shard
    blob = shard.to_bytes()
    back = Shard.from_bytes(blob)
    assert back.to_bytes() == blob and back.dims == shard.dims and len(back) == len(shard)
