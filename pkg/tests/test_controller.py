import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spi.bench.oracle import oracle_batch
from spi.controller.depth import (DepthController, FixedDepthController, QueryPlan,
                                  RandomDepthController, budget_schedule, escalate, fixed_plan,
                                  merge_rare_classes, train_controller)
from spi.controller.entropy import query_entropy
from spi.controller.labeling import depth_labels, label_queries
from spi.exceptions import ChecksumError
from spi.index.level_index import IndexSpec
from spi.retrieval.pipeline import SemanticPyramidIndex

from conftest import unit_rows


def test_entropy_reference_values():
    assert query_entropy(np.eye(8)[3]) == 0.0
    assert query_entropy(np.full(16, -0.25)) == pytest.approx(math.log(16))
    q = np.zeros(16)
    q[:2] = math.sqrt(0.5)
    assert query_entropy(q) == pytest.approx(math.log(2))


def test_entropy_rejects_zero_vector():
    with pytest.raises(ValueError):
        query_entropy(np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=32),
       st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_entropy_is_scale_invariant_and_bounded(values, c):
    q = np.array(values)
    if not np.any(np.abs(q) > 1e-6):
        return
    h = query_entropy(q)
    assert 0.0 <= h <= math.log(len(q)) + 1e-12
    assert query_entropy(c * q) == pytest.approx(h, abs=1e-9)


def test_budget_schedule_defaults():
    assert budget_schedule(10, 3) == (320, 80, 20)
    assert budget_schedule(10, 5) == (320, 80, 20, 10, 10)
    assert budget_schedule(1, 1) == (32,)
    with pytest.raises(ValueError):
        budget_schedule(0, 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(1, 6))
def test_budgets_are_nonincreasing_and_cover_k(k, depth):
    b = budget_schedule(k, depth)
    assert len(b) == depth and b[-1] >= k
    assert all(x >= y for x, y in zip(b, b[1:]))
    QueryPlan(depth, 0.0, depth, b)


def test_query_plan_invariants():
    with pytest.raises(ValueError):
        QueryPlan(2, 0.1, 1, (10,))
    with pytest.raises(ValueError):
        QueryPlan(1, 0.1, 3, (30, 20, 10))
    with pytest.raises(ValueError):
        QueryPlan(1, 0.1, 2, (10, 20))
    with pytest.raises(ValueError):
        QueryPlan(1, 0.1, 1, (10, 5))


def test_escalation_rule():
    assert escalate(2, 0.0, 0.4, 3) == 2
    assert escalate(3, 0.9, 0.4, 3) == 3
    assert escalate(1, 0.9, 0.4, 3) == 2
    assert escalate(1, 0.4, 0.4, 3) == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_final_depth_is_nonincreasing_in_threshold(pred, sigma, t1, t2):
    lo, hi = sorted((t1, t2))
    assert escalate(pred, sigma, hi, 5) <= escalate(pred, sigma, lo, 5)


def separable(rng, n=600, d=12):
    Q = unit_rows(rng, n, d)
    labels = np.digitize(Q[:, 0], [-0.2, 0.2]) + 1
    return Q, labels


def test_controller_learns_separable_labels(rng):
    Q, labels = separable(rng)
    ctrl, report = train_controller(Q, labels, n_levels=3, C=100.0)
    assert report["accuracy"] >= 0.95
    assert report["accuracy"] >= max(report["prior_baseline"], 1 / 3)


def test_random_labels_give_about_the_prior(rng):
    Q = unit_rows(rng, 900, 12)
    labels = rng.integers(1, 4, size=900)
    _, report = train_controller(Q, labels, n_levels=3)
    assert abs(report["accuracy"] - report["prior_baseline"]) <= 0.1


def test_single_class_gives_constant_confident_controller(rng):
    Q = unit_rows(rng, 50, 8)
    ctrl = DepthController(n_levels=3).fit(Q, np.full(50, 2))
    plan = ctrl.plan(Q[0], 10)
    assert (plan.predicted, plan.sigma, plan.final) == (2, 0.0, 2)


def test_probabilities_sum_to_one(rng):
    Q, labels = separable(rng)
    P = DepthController(n_levels=3).fit(Q, labels).class_probabilities(Q[:40])
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(P >= 0)


def test_plan_follows_uncertainty_rule(rng):
    Q, labels = separable(rng)
    ctrl = DepthController(n_levels=3, threshold=0.4).fit(Q, labels)
    for q in Q[:50]:
        p = ctrl.class_probabilities(q)[0]
        plan = ctrl.plan(q, 10)
        assert plan.predicted == int(np.argmax(p)) + 1
        assert plan.sigma == pytest.approx(1 - p.max())
        assert plan.final == escalate(plan.predicted, plan.sigma, 0.4, 3)
        assert plan.budgets == budget_schedule(10, plan.final)


def test_rare_classes_fold_into_neighbours():
    labels = np.array([1] * 3 + [2] * 20 + [3] * 4)
    merged = merge_rare_classes(labels, 3, min_count=10)
    assert set(merged.tolist()) == {2}
    labels = np.array([1] * 30 + [2] * 5 + [3] * 30)
    assert merge_rare_classes(labels, 3).tolist() == [1] * 30 + [3] * 35
    assert merge_rare_classes(np.array([1] * 3), 3).tolist() == [1] * 3


def test_untrained_controller_uses_full_depth(rng):
    ctrl = DepthController(n_levels=4)
    assert not ctrl.is_trained
    plan = ctrl.plan(unit_rows(rng, 1, 8)[0], 5)
    assert (plan.predicted, plan.final, plan.sigma) == (4, 4, 0.0)


@pytest.mark.parametrize("protos", [0, 6])
def test_controller_checkpoint_round_trip(protos, rng, tmp_path):
    Q, labels = separable(rng)
    ctrl = DepthController(n_levels=3, n_prototypes=protos).fit(Q, labels)
    blob = ctrl.to_bytes()
    assert blob[:4] == b"SPIC"
    back = DepthController.from_bytes(blob)
    np.testing.assert_array_equal(back.class_probabilities(Q), ctrl.class_probabilities(Q))
    assert back.to_bytes() == blob
    ctrl.save(tmp_path / "c.spc")
    assert DepthController.load(tmp_path / "c.spc").to_bytes() == blob
    assert DepthController.from_bytes(DepthController(n_levels=2).to_bytes()).n_levels == 2
    bad = bytearray(blob)
    bad[-10] ^= 1
    with pytest.raises(ChecksumError):
        DepthController.from_bytes(bytes(bad))


def test_binary_problem_keeps_softmax_semantics(rng):
    Q = unit_rows(rng, 200, 6)
    labels = np.where(Q[:, 0] > 0, 3, 1)
    ctrl = DepthController(n_levels=3).fit(Q, labels)
    P = ctrl.class_probabilities(Q)
    assert np.all(P[:, 1] == 0)
    assert np.mean(ctrl.predict(Q) == labels) > 0.9


def test_random_depth_is_uniform_and_reproducible(rng):
    ctrl = RandomDepthController(n_levels=3, seed=4)
    Q = unit_rows(rng, 1000, 8)
    depths = np.array([ctrl.plan(q, 10).final for q in Q])
    np.testing.assert_allclose(np.bincount(depths, minlength=4)[1:] / 1000, 1 / 3, atol=0.05)
    assert [ctrl.plan(q, 10).final for q in Q[:20]] == depths[:20].tolist()
    with pytest.raises(ValueError):
        RandomDepthController(n_levels=3, level_probs=[1, 0])


def test_fixed_controller():
    plan = FixedDepthController(2).plan(None, 10)
    assert plan == fixed_plan(2, 10) and plan.final == 2


# -- labeling ----------------------------------------------------------------------

def test_depth_labels_pick_cheapest_sufficient_level():
    rec = np.array([[1.0, 1.0, 1.0], [0.5, 0.9, 1.0], [0.2, 0.5, 0.99], [0.0, 0.0, 0.0]])
    assert depth_labels(rec, 0.98).tolist() == [1, 3, 3, 1]
    assert depth_labels(rec, 0.9).tolist() == [1, 2, 3, 1]
    assert depth_labels(rec, 0.0).tolist() == [1, 1, 1, 1]


@pytest.fixture(scope="module")
def labeled(small_encoder, small_corpus, small_queries):
    system = SemanticPyramidIndex(encoder=small_encoder,
                                  coarse_index=IndexSpec("IVF", n_lists=16, n_probe=4)).fit(small_corpus.vectors)
    ids, V = system.level_vectors(3)
    Q3 = small_encoder.encode(small_queries.vectors)[2]
    truth, _ = oracle_batch(V, Q3, 10, ids)
    return system, truth


def test_label_queries_and_csv(labeled, small_queries):
    system, truth = labeled
    lab = label_queries(system, small_queries.vectors, truth, k=10)
    assert lab.recalls.shape == (len(truth), 3)
    assert lab.histogram().sum() == len(truth)
    # a query whose coarse retrieval is already perfect is labeled 1
    perfect = lab.recalls[:, 0] >= 0.98 * lab.recalls[:, 2]
    assert np.all(lab.labels[perfect] == 1)
    assert lab.to_csv().splitlines()[0] == "query_id,label,entropy,recall_1,recall_2,recall_3"
    vacuous = label_queries(system, small_queries.vectors[:10], truth[:10], k=10, tau=0.0)
    assert vacuous.labels.tolist() == [1] * 10


def test_labeling_requires_truth(labeled, small_queries):
    with pytest.raises(ValueError):
        label_queries(labeled[0], small_queries.vectors, None)
