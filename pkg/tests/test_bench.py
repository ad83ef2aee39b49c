import json

import numpy as np
import pytest

from spi.bench.corpus import CorpusSpec, dequantize_int8, make_corpus, make_queries, quantize_int8
from spi.bench.experiments import (ConfigError, ExperimentConfig, ExperimentError, criterion_experiments,
                                   experiment, run_experiment, EXPERIMENTS)
from spi.bench.ingest import IngestError, ingest, write_vectors
from spi.bench.metrics import compute_metrics, mrr_at_k, ndcg_at_k, recall_at_k
from spi.bench.oracle import oracle_topk
from spi.exceptions import ChecksumError
from spi.index.level_index import IndexSpec, LevelIndex

from conftest import unit_rows


def test_corpus_is_reproducible_and_unit():
    a = make_corpus(n_docs=500, dim=32, n_clusters=5, seed=3)
    b = make_corpus(n_docs=500, dim=32, n_clusters=5, seed=3)
    assert np.array_equal(a.vectors, b.vectors)
    assert np.allclose(np.linalg.norm(a.vectors, axis=1), 1.0, atol=1e-6)
    assert not np.array_equal(a.vectors, make_corpus(n_docs=500, dim=32, n_clusters=5, seed=4).vectors)
    q1, q2 = make_queries(a, 40, seed=2), make_queries(a, 40, seed=2)
    assert np.array_equal(q1.vectors, q2.vectors) and (q1.kinds == "hard").sum() == 20


def test_corpus_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(kind="Other")
    with pytest.raises(ValueError):
        CorpusSpec(storage="Float16")


def test_int8_error_bound(rng):
    X = unit_rows(rng, 200, 48)
    codes, scales = quantize_int8(X)
    err = np.abs(dequantize_int8(codes, scales) - X)
    assert (err <= scales[:, None] / 254.0 + 1e-7).all()
    assert make_corpus(n_docs=100, dim=16, n_clusters=4, storage="Int8Scaled").vectors.dtype == np.float32


@pytest.mark.parametrize("name", ["e.spv", "e.csv"])
def test_ingest_round_trip(tmp_path, rng, name):
    X = unit_rows(rng, 30, 8).astype(np.float32)
    path = tmp_path / name
    write_vectors(path, X)
    got = ingest(path)
    assert np.array_equal(got.corpus.vectors, X) and got.n_docs == 30 and got.dim == 8


def test_ingest_normalizes_and_quantizes(tmp_path, rng):
    X = (unit_rows(rng, 20, 8) * 3.0).astype(np.float32)
    write_vectors(tmp_path / "v.spv", X)
    got = ingest(tmp_path / "v.spv", storage="Int8Scaled")
    assert np.allclose(np.linalg.norm(got.corpus.vectors, axis=1), 1.0, atol=1e-6)
    assert got.codes.dtype == np.int8 and got.nbytes_at_rest() < X.nbytes


def test_ingest_rejects_bad_rows(tmp_path):
    (tmp_path / "a.csv").write_text("1,0\n0,1\n1,x\n")
    with pytest.raises(IngestError) as info:
        ingest(tmp_path / "a.csv")
    assert info.value.row == 2 and "row 2" in str(info.value)
    (tmp_path / "b.csv").write_text("1,0\n0,1,0\n")
    with pytest.raises(IngestError, match="row 1"):
        ingest(tmp_path / "b.csv")
    (tmp_path / "c.csv").write_text("1,0\nnan,1\n")
    with pytest.raises(IngestError, match="NaN"):
        ingest(tmp_path / "c.csv")
    (tmp_path / "d.csv").write_text("0,0\n")
    with pytest.raises(IngestError, match="zero"):
        ingest(tmp_path / "d.csv")
    with pytest.raises(IngestError):
        ingest(tmp_path / "d.csv", dim=3)


def test_binary_ingest_detects_corruption(tmp_path, rng):
    write_vectors(tmp_path / "v.spv", unit_rows(rng, 5, 4))
    blob = bytearray((tmp_path / "v.spv").read_bytes())
    blob[30] ^= 0xFF
    (tmp_path / "v.spv").write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        ingest(tmp_path / "v.spv")


def test_oracle_full_sort_and_self_query(rng):
    X = unit_rows(rng, 50, 8)
    ids, scores = oracle_topk(X, X[7], 50)
    assert ids[0] == 7 and sorted(ids.tolist()) == list(range(50))
    assert (np.diff(scores) <= 0).all()
    with pytest.raises(ValueError):
        oracle_topk(X, X[0], 51)


def test_oracle_agrees_with_flat_index():
    for seed in range(100):
        r = np.random.default_rng(seed)
        X = unit_rows(r, 40, 6)
        q = unit_rows(r, 1, 6)[0]
        idx = LevelIndex.build(X, spec=IndexSpec("Flat"))
        got = idx.search(q, 5)
        ids, scores = oracle_topk(X, q, 5)
        assert np.array_equal(got.ids, ids) and np.array_equal(got.scores, scores)


def test_metric_examples():
    assert recall_at_k([1, 2, 3], [3, 4, 5], 3) == pytest.approx(1 / 3)
    assert mrr_at_k([9, 8, 1], [1, 2], 2) == 0.0
    assert mrr_at_k([9, 8, 1], [1, 2, 3], 3) == pytest.approx(1 / 3)
    assert ndcg_at_k([1, 2], [1, 2], 2) == pytest.approx(1.0)
    assert ndcg_at_k([5, 1], [1, 2], 2) == pytest.approx((1 / np.log2(3)) / (1 + 1 / np.log2(3)))


def test_metrics_independent_recomputation(rng):
    truth = {q: rng.permutation(100)[:20] for q in range(30)}
    results = {q: np.concatenate([truth[q][:int(rng.integers(0, 20))], np.arange(200, 220)])[:20]
               for q in range(30)}
    results[99] = np.arange(20)  # no truth: excluded
    timings = {q: 0.001 * (q + 1) for q in range(30)}
    m = compute_metrics(results, truth, timings, costs={q: 10 for q in range(30)})
    assert m.n_excluded == 1 and m.n_queries == 30
    r10 = np.mean([len(set(results[q][:10]) & set(truth[q][:10])) / 10 for q in range(30)])
    assert abs(m.recall_at_10 - r10) <= 1e-9
    mrr = []
    for q in range(30):
        rel = set(truth[q][:10].tolist())
        mrr.append(next((1 / (i + 1) for i, d in enumerate(results[q][:10]) if d in rel), 0.0))
    assert abs(m.mrr_at_10 - np.mean(mrr)) <= 1e-9
    assert m.mean_latency_ms == pytest.approx(15.5) and m.scored_vectors == 10.0
    with pytest.raises(ValueError):
        compute_metrics({1: [1]}, {2: [1]})


# -- experiment harness ------------------------------------------------------------

def _probe(run):
    for p in run.points:
        if p["x"] == run["fail_at"]:
            raise RuntimeError("boom")
        run.row(x=p["x"], y=p["x"] * 2)
        run.timing(x=p["x"], seconds=0.0)
    return {"checks": {"ran": True}}


@pytest.fixture(autouse=True)
def probe_experiment():
    experiment("_probe", grid={"x": [1, 2, 3]}, fail_at=0)(_probe)
    yield
    EXPERIMENTS.pop("_probe", None)


def test_config_validation():
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig("nope"))
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig("_probe", repetitions=0))
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig("_probe", grid={"x": []}))
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig("_probe", params={"zzz": 1}))
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig("_probe", fmt="xml"))


def test_outputs_written(tmp_path):
    rep = run_experiment(ExperimentConfig("_probe", out=str(tmp_path), fmt="json"))
    assert rep.passed and [r["y"] for r in rep.rows] == [2, 4, 6]
    assert json.loads((tmp_path / "_probe.json").read_text())[0] == {"x": 1, "y": 2}
    summary = json.loads((tmp_path / "_probe_summary.json").read_text())
    assert summary["status"] == "ok" and summary["checks"] == {"ran": True}
    assert (tmp_path / "_probe_timings.csv").read_text().splitlines()[0] == "x,seconds"


def test_failure_flushes_partial_results(tmp_path):
    with pytest.raises(ExperimentError) as info:
        run_experiment(ExperimentConfig("_probe", out=str(tmp_path), params={"fail_at": 3}))
    rep = info.value.report
    assert len(rep.rows) == 2 and rep.summary["status"] == "failed" and not rep.passed
    lines = (tmp_path / "_probe.csv").read_text().splitlines()
    assert lines == ["x,y", "1,2", "2,4"]
    assert "boom" in json.loads((tmp_path / "_probe_summary.json").read_text())["error"]


def test_repetitions_tag_rows():
    rep = run_experiment(ExperimentConfig("_probe", repetitions=2, grid={"x": [1]}))
    assert [r["repetition"] for r in rep.rows] == [0, 1] and rep.passed


def test_every_criterion_has_an_experiment():
    mapping = criterion_experiments()
    assert sorted(mapping) == list(range(1, 11))
    assert all(name in EXPERIMENTS for name in mapping.values())
