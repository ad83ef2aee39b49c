"""Named, seeded experiments with CSV/JSON reports.

Every experiment returns per-run rows, a JSON summary whose ``checks`` map
names each pass/fail condition it evaluates, and timing rows kept apart so
the main outputs are byte-identical across reruns with the same seed.
"""

import itertools
import math
import threading
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..controller.depth import (DepthController, FixedDepthController, RandomDepthController,
                                fixed_plan, train_controller)
from ..controller.entropy import query_entropy
from ..controller.labeling import label_queries
from ..exceptions import ChecksumError, ShardUnavailableError
from ..fabric.cluster import build_cluster
from ..fabric.load import update_load
from ..fabric.partition import PartitionMap, partition
from ..fabric.protocol import Frame, MsgType, SearchReply, SearchRequest, decode_frame
from ..fabric.simulate import CostModel, profile_queries, simulate
from ..index.level_index import IndexSpec, LevelIndex
from ..pyramid.consistency import semantic_consistency
from ..pyramid.encoder import ProgressiveEncoder
from ..pyramid.losses import EncoderParams, LossWeights, total_loss
from ..retrieval.pipeline import DEFAULT_COARSE, SemanticPyramidIndex, Shard, retrieve
from ..retrieval.trace import hit_attribution
from . import report
from .corpus import make_corpus, make_queries
from .ingest import decode_binary, encode_binary
from .metrics import compute_metrics, recall_at_k
from .oracle import oracle_batch


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


class ExperimentError(RuntimeError):
    """A step failed; ``report`` holds the partial results, already flushed."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class ExperimentConfig:
    name: str
    grid: dict | None = None  # parameter -> list of values; None uses the experiment default
    repetitions: int = 1
    out: str | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)
    fmt: str = "csv"

    def validate(self):
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.name!r}; expected one of {sorted(EXPERIMENTS)}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.fmt not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        exp = EXPERIMENTS[self.name]
        grid = exp.grid if self.grid is None else self.grid
        if not grid or any(len(v) == 0 for v in grid.values()):
            raise ConfigError("grid must be nonempty")
        unknown = set(self.params) - set(exp.defaults)
        unknown |= set(grid) - set(exp.defaults) - set(exp.grid)
        if unknown:
            raise ConfigError(f"unknown parameter(s) for {self.name}: {sorted(unknown)}")
        return self


@dataclass
class ExperimentReport:
    name: str
    rows: list
    summary: dict
    timings: list
    files: list = field(default_factory=list)

    @property
    def checks(self):
        return self.summary.get("checks", {})

    @property
    def passed(self):
        return self.summary.get("status") == "ok" and all(self.checks.values())

    def rows_text(self, fmt="csv"):
        return report.rows_to_csv(self.rows) if fmt == "csv" else report.rows_to_json(self.rows)

    def summary_text(self):
        return report.to_json(self.summary)


@dataclass(frozen=True)
class Experiment:
    name: str
    fn: object
    grid: dict
    defaults: dict
    criterion: int | None
    doc: str


EXPERIMENTS = {}


def experiment(name, grid, criterion=None, **defaults):
    def register(fn):
        EXPERIMENTS[name] = Experiment(name, fn, grid, defaults, criterion, (fn.__doc__ or "").strip())
        return fn
    return register


class Run:
    """What an experiment function sees: merged params, grid points and sinks for rows."""

    def __init__(self, params, points, seed, cached=True, clock=time.perf_counter):
        self.params = params
        self.points = points
        self.seed = seed
        self.cached = cached
        self.clock = clock
        self.rows = []
        self.timings = []

    def __getitem__(self, key):
        return self.params[key]

    def row(self, **fields):
        self.rows.append(fields)

    def timing(self, **fields):
        self.timings.append(fields)

    def values(self, key):
        return [p[key] for p in self.points]


_CACHE = {}


def clear_cache():
    _CACHE.clear()


def _memo(run, key, build):
    if not run.cached:
        return build()
    if key not in _CACHE:
        _CACHE[key] = build()
    return _CACHE[key]


def run_experiment(config, cached=True):
    """Run ``config`` and write ``<name>.<fmt>``, ``<name>_summary.json`` and
    ``<name>_timings.csv`` under ``config.out`` when given.

    On failure the rows gathered so far are flushed with ``status: failed``
    in the summary and :class:`ExperimentError` is raised.
    """
    config.validate()
    exp = EXPERIMENTS[config.name]
    grid = exp.grid if config.grid is None else config.grid
    keys = sorted(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(list(grid[k]) for k in keys))]
    params = {**exp.defaults, **config.params}
    rows, timings, summaries = [], [], []
    status, error = "ok", None
    for rep in range(config.repetitions):
        run = Run(params, points, config.seed + rep, cached)
        try:
            summaries.append(exp.fn(run))
        except Exception as exc:  # partial results are flushed, then the error propagates
            status, error = "failed", f"{type(exc).__name__}: {exc}"
        finally:
            for r in run.rows:
                rows.append({"repetition": rep, **r} if config.repetitions > 1 else r)
            for t in run.timings:
                timings.append({"repetition": rep, **t} if config.repetitions > 1 else t)
        if status == "failed":
            break
    if len(summaries) == 1 and status == "ok":
        summary = dict(summaries[0])
    else:
        checks = {}
        for s in summaries:
            for k, v in s.get("checks", {}).items():
                checks[k] = checks.get(k, True) and bool(v)
        summary = {"repetitions": summaries, "checks": checks}
    summary.update(experiment=config.name, seed=config.seed, status=status,
                   params=params, grid={k: list(grid[k]) for k in keys})
    if error:
        summary["error"] = error
    out = ExperimentReport(config.name, rows, report.plain(summary), timings)
    if config.out:
        base = Path(config.out)
        out.files = [
            report.write_text(base / f"{config.name}.{config.fmt}", out.rows_text(config.fmt)),
            report.write_text(base / f"{config.name}_summary.json", out.summary_text()),
            report.write_text(base / f"{config.name}_timings.csv", report.rows_to_csv(timings)),
        ]
    if status == "failed":
        raise ExperimentError(f"{config.name} failed: {error}", out)
    return out


# -- shared builders ----------------------------------------------------------

def _corpus(run, n_docs, seed):
    return _memo(run, ("corpus", n_docs, run.params.get("dim", 64), seed),
                 lambda: make_corpus(n_docs=n_docs, dim=run.params.get("dim", 64), seed=seed))


def _encoder(run, n_docs, level_dims, seed, fine_blend=0.5, train_docs=None):
    def build():
        corpus = _corpus(run, n_docs, seed)
        X = corpus.vectors if train_docs is None else corpus.vectors[:train_docs]
        return ProgressiveEncoder(level_dims=tuple(level_dims), fine_blend=fine_blend,
                                  random_state=seed).fit(X)
    return _memo(run, ("encoder", n_docs, tuple(level_dims), seed, fine_blend, train_docs), build)


def _system(run, n_docs, level_dims, seed, coarse=DEFAULT_COARSE):
    def build():
        corpus = _corpus(run, n_docs, seed)
        enc = _encoder(run, n_docs, level_dims, seed)
        return SemanticPyramidIndex(encoder=enc, coarse_index=coarse,
                                    random_state=seed).fit(corpus.vectors, ids=corpus.ids)
    return _memo(run, ("system", n_docs, tuple(level_dims), seed, coarse), build)


def _level_truth(system, queries, k, level=None):
    level = level or system.n_levels_
    ids, V = system.level_vectors(level)
    q = system.encoder_.encode(queries)[level - 1]
    return oracle_batch(V, q, k, ids)[0]


def _recalls(results, truth, k):
    return np.array([recall_at_k(r, t, k) for r, t in zip(results, truth)])


def _run_queries(run, retrieve_one, queries):
    """Issue every query; returns results, traces and per-query seconds."""
    results, traces, seconds = [], [], []
    for q in queries:
        t0 = run.clock()
        res = retrieve_one(q)
        seconds.append(run.clock() - t0)
        results.append(res.ids)
        traces.append(res.trace)
    return results, traces, np.array(seconds)


def _split_metrics(record):
    d = record.as_dict()
    timing = {k: d.pop(k) for k in record.TIMING_FIELDS}
    return d, timing


# -- 1. exactness ---------------------------------------------------------------

@experiment("exactness", grid={"n_nodes": [4]}, criterion=1,
            n_docs=2000, n_queries=100, k=10, level_dims=(16, 32, 64))
def exactness(run):
    """Flat backends with budgets equal to the corpus size reproduce the exact oracle."""
    n, k, dims = run["n_docs"], run["k"], run["level_dims"]
    corpus = _corpus(run, n, run.seed)
    # blend 1 makes the finest level the source vectors themselves
    enc = _encoder(run, n, dims, run.seed, fine_blend=1.0)
    levels = enc.encode(corpus.vectors)
    rng = np.random.default_rng([run.seed, 3])
    queries = rng.normal(size=(run["n_queries"], corpus.dim))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    src_ids, _ = oracle_batch(corpus.vectors, queries, k, corpus.ids)
    lvl_ids, lvl_scores = oracle_batch(levels[-1], enc.encode(queries)[-1], k, corpus.ids)
    plan = fixed_plan(len(dims), k, budgets=(n,) * len(dims))
    flat = IndexSpec("Flat")
    ok_all = True
    for point in run.points:
        nodes = point["n_nodes"]
        cluster = build_cluster(levels, corpus.ids, n_nodes=nodes, coarse=flat, refine=flat,
                                seed=run.seed, cache_specs=None)
        try:
            same_src = same_lvl = same_scores = 0
            t0 = run.clock()
            for i, q in enumerate(queries):
                res = cluster.retrieve(q, enc, DepthController(len(dims)), k, plan)
                same_src += np.array_equal(res.ids, src_ids[i])
                same_lvl += np.array_equal(res.ids, lvl_ids[i])
                same_scores += np.array_equal(res.scores, lvl_scores[i])
            wall = run.clock() - t0
        finally:
            cluster.close()
        nq = len(queries)
        exact = same_src == nq and same_lvl == nq and same_scores == nq
        ok_all &= exact
        run.row(n_docs=n, n_nodes=nodes, n_queries=nq, k=k, identical_to_source_oracle=same_src,
                identical_to_level_oracle=same_lvl, identical_scores=same_scores, exact=exact)
        run.timing(n_nodes=nodes, seconds=wall)
    return {"checks": {"exact_match": bool(ok_all)}}


# -- 2. levels ablation ------------------------------------------------------------

@experiment("levels-ablation", criterion=2,
            grid={"level_dims": [(16,), (16, 64), (16, 32, 64), (16, 32, 48, 64)]},
            n_docs=10000, n_queries=500, k=10, min_recall=0.90, max_scored_fraction=0.35)
def levels_ablation(run):
    """Recall and scored-vector counts as the number of pyramid levels varies."""
    n, k = run["n_docs"], run["k"]
    corpus = _corpus(run, n, run.seed)
    qs = make_queries(corpus, run["n_queries"], seed=run.seed + 1)
    source_truth = oracle_batch(corpus.vectors, qs.vectors, 20, corpus.ids)[0]
    rows = {}
    flat_ms = None
    for point in run.points:
        dims = tuple(point["level_dims"])
        L = len(dims)
        coarse = IndexSpec("Flat") if L == 1 else DEFAULT_COARSE
        system = _system(run, n, dims, run.seed, coarse)
        own_truth = _level_truth(system, qs.vectors, k)
        plan = fixed_plan(L, k)
        results, traces, secs = _run_queries(run, lambda q: system.retrieve(q, k, plan), qs.vectors)
        results20, _, _ = _run_queries(run, lambda q: system.retrieve(q, 20, fixed_plan(L, 20)),
                                       qs.vectors)
        costs = {i: t.cost for i, t in enumerate(traces)}
        rec = compute_metrics(dict(enumerate(results)), dict(enumerate(source_truth[:, :k])),
                              dict(enumerate(secs)), costs, system.searcher_.shard.nbytes())
        rec = replace(rec, recall_at_20=float(_recalls(results20, source_truth, 20).mean()))
        metrics, timing = _split_metrics(rec)
        flat_scan = _recalls(own_truth, source_truth, k).mean()  # exact scan of level L
        own = _recalls(results, own_truth, k).mean()
        scored = float(np.mean([t.cost for t in traces]))
        row = {"n_levels": L, "level_dims": list(dims), **metrics,
               "recall_vs_level_oracle": float(own),
               "flat_scan_recall": float(flat_scan),
               "recall_ratio_to_flat_scan": float(metrics["recall_at_10"] / flat_scan) if flat_scan else 0.0,
               "scored_fraction": scored / n, "speedup_scored": n / scored}
        rows[L] = row
        run.row(**row)
        if L == 1:
            flat_ms = timing["mean_latency_ms"]
        run.timing(n_levels=L, **timing, **({"wall_speedup_vs_flat": flat_ms / timing["mean_latency_ms"]}
                                            if flat_ms else {}))
    checks = {}
    if 3 in rows:
        checks["three_level_recall"] = rows[3]["recall_vs_level_oracle"] >= run["min_recall"]
        checks["three_level_scored_fraction"] = rows[3]["scored_fraction"] <= run["max_scored_fraction"]
    if 1 in rows:
        checks["one_level_scores_all"] = rows[1]["scored_fraction"] == 1.0
    Ls = sorted(rows)
    trend = {
        "recall_nondecreasing": all(rows[b]["recall_at_10"] >= rows[a]["recall_at_10"] - 0.01
                                    for a, b in zip(Ls, Ls[1:])),
        "scored_min_near_3": abs(min(Ls, key=lambda L: rows[L]["scored_fraction"]) - 3) <= 1,
    }
    return {"checks": checks, "trend": trend,
            "speedup_scored": {str(L): rows[L]["speedup_scored"] for L in Ls}}


# -- 3 & 5. control ablation and recall bound ----------------------------------------

def _controlled(run):
    """Build, label, train and evaluate the depth controllers once per seed."""
    p = run.params
    key = ("controlled", p["n_docs"], tuple(p["level_dims"]), run.seed, p["n_train"], p["n_test"],
           p["k"], p["tau"], p["threshold"], p["n_prototypes"])

    def build():
        n, k, dims = p["n_docs"], p["k"], tuple(p["level_dims"])
        L = len(dims)
        corpus = _corpus(run, n, run.seed)
        system = _system(run, n, dims, run.seed)
        train = make_queries(corpus, p["n_train"], seed=run.seed + 1)
        test = make_queries(corpus, p["n_test"], seed=run.seed + 2)
        lab_train = label_queries(system, train.vectors, _level_truth(system, train.vectors, k), k, p["tau"])
        test_truth = _level_truth(system, test.vectors, k)
        lab_test = label_queries(system, test.vectors, test_truth, k, p["tau"])
        ctrl, fit_report = train_controller(lab_train.coarse, lab_train.labels, n_levels=L,
                                            threshold=p["threshold"], random_state=run.seed,
                                            n_prototypes=p["n_prototypes"])
        evaluated = {}

        def evaluate(planner, plans=None):
            plans = iter(plans or [])
            results, traces, secs = _run_queries(
                run, lambda q: retrieve(q, system.encoder_, planner, system.searcher_, k,
                                        next(plans, None)), test.vectors)
            return {"recall": _recalls(results, test_truth, k), "traces": traces, "seconds": secs}

        evaluated["fixed"] = evaluate(FixedDepthController(L))
        evaluated["adaptive"] = evaluate(ctrl)
        hist = hit_attribution(evaluated["adaptive"]["traces"], L)
        evaluated["random"] = evaluate(RandomDepthController(L, level_probs=hist, seed=run.seed))
        # perfect depth labels: the most any controller could save at this tau
        evaluated["oracle"] = evaluate(None, [fixed_plan(int(lab), k) for lab in lab_test.labels])
        accuracy = float(np.mean(ctrl.predict(lab_test.coarse) == lab_test.labels))
        return {"L": L, "system": system, "controller": ctrl, "fit_report": fit_report,
                "lab_train": lab_train, "lab_test": lab_test, "evaluated": evaluated,
                "test_accuracy": accuracy}
    return _memo(run, key, build)


_CONTROL_DEFAULTS = dict(n_docs=10000, level_dims=(16, 32, 64), n_train=1000, n_test=500, k=10,
                         tau=0.98, threshold=0.4, n_prototypes=32)


@experiment("control-ablation", grid={"controller": ["fixed", "adaptive", "random", "oracle"]},
            criterion=3,
            recall_tolerance=0.005, min_cost_reduction=0.25, min_accuracy=0.70, cost_match=0.05,
            **_CONTROL_DEFAULTS)
def control_ablation(run):
    """Adaptive depth control against fixed full depth and a matched random depth.

    The ``oracle`` variant follows each query's true cheapest sufficient
    depth; it bounds the recall and savings any controller can reach.
    """
    c = _controlled(run)
    ev = c["evaluated"]
    stats = {}
    for name in run.values("controller"):
        e = ev[name]
        cost = float(np.mean([t.cost for t in e["traces"]]))
        att = hit_attribution(e["traces"], c["L"])
        stats[name] = {"recall_at_10": float(e["recall"].mean()), "scored_vectors": cost}
        reduction = 1.0 - cost / float(np.mean([t.cost for t in ev["fixed"]["traces"]]))
        run.row(controller=name, recall_at_10=stats[name]["recall_at_10"], scored_vectors=cost,
                cost_reduction_vs_fixed=reduction, depth_attribution=att, n_queries=len(e["traces"]))
        run.timing(controller=name, mean_latency_ms=float(e["seconds"].mean() * 1e3))
    checks = {"controller_accuracy": c["test_accuracy"] >= run["min_accuracy"]}
    if {"fixed", "adaptive"} <= stats.keys():
        fixed, adapt = stats["fixed"], stats["adaptive"]
        checks["adaptive_recall_matches_fixed"] = (
            abs(adapt["recall_at_10"] - fixed["recall_at_10"]) <= run["recall_tolerance"])
        checks["adaptive_cost_reduction"] = (
            1.0 - adapt["scored_vectors"] / fixed["scored_vectors"] >= run["min_cost_reduction"])
    if {"random", "adaptive"} <= stats.keys():
        rnd, adapt = stats["random"], stats["adaptive"]
        matched = abs(rnd["scored_vectors"] - adapt["scored_vectors"]) <= run["cost_match"] * adapt["scored_vectors"]
        checks["random_worse_at_equal_cost"] = matched and rnd["recall_at_10"] < adapt["recall_at_10"]
    lt = c["lab_test"]
    return {"checks": checks, "variants": stats,
            "controller": {"test_accuracy": c["test_accuracy"], **c["fit_report"],
                           "train_label_histogram": c["lab_train"].histogram(),
                           "test_label_histogram": lt.histogram(),
                           "recall_by_depth": lt.recalls.mean(axis=0)}}


@experiment("recall-bound", grid={"pair": [(1, 2), (2, 3)]}, criterion=5, slack=0.03,
            **_CONTROL_DEFAULTS)
def recall_bound(run):
    """Measured SPI recall against the consistency-weighted oracle-depth recall."""
    c = _controlled(run)
    lt = c["lab_test"]
    enc = c["system"].encoder_
    corpus = _corpus(run, run["n_docs"], run.seed)
    levels = enc.encode(corpus.vectors)
    rhos = []
    for point in run.points:
        lo, hi = point["pair"]
        rep = semantic_consistency(enc, levels, lo, hi, rows=enc.holdout_index_)
        rhos.append(rep.rho)
        run.row(lo=lo, hi=hi, rho=rep.rho)
    p = c["test_accuracy"]
    rho_min = float(min(rhos))
    r_star = lt.recalls[np.arange(len(lt.labels)), lt.labels - 1]
    r_spi = c["evaluated"]["adaptive"]["recall"]
    bound = (p + (1.0 - p) * rho_min) * float(r_star.mean()) - run["slack"]
    run.row(lo="", hi="", rho="", accuracy=p, rho_min=rho_min, oracle_depth_recall=float(r_star.mean()),
            spi_recall=float(r_spi.mean()), bound=bound)
    return {"checks": {"recall_bound": float(r_spi.mean()) >= bound},
            "accuracy": p, "rho_min": rho_min, "oracle_depth_recall": float(r_star.mean()),
            "spi_recall": float(r_spi.mean()), "bound": bound}


# -- 4. consistency --------------------------------------------------------------------

@experiment("consistency", grid={"pair": [(1, 2), (2, 3), (1, 3)]}, criterion=4,
            n_docs=10000, level_dims=(16, 32, 64), k=10, min_preservation=0.93,
            min_rho={"1-2": 0.85, "2-3": 0.83, "1-3": 0.80})
def consistency(run):
    """Cross-level cosine agreement, drift and neighbour preservation on held-out docs."""
    n = run["n_docs"]
    corpus = _corpus(run, n, run.seed)
    enc = _encoder(run, n, run["level_dims"], run.seed)
    levels = enc.encode(corpus.vectors)
    checks = {}
    for point in run.points:
        lo, hi = point["pair"]
        rep = semantic_consistency(enc, levels, lo, hi, rows=enc.holdout_index_, k=run["k"])
        run.row(**rep.as_dict())
        name = f"{lo}-{hi}"
        if name in run["min_rho"]:
            checks[f"rho_{name}"] = rep.rho >= run["min_rho"][name]
        if hi == lo + 1:
            checks[f"preservation_{name}"] = rep.recall_preservation >= run["min_preservation"]
        checks[f"bound_{name}"] = rep.bound_holds
    return {"checks": checks}


# -- 6. scaling --------------------------------------------------------------------------

@experiment("scaling", grid={"n_nodes": [1, 2, 4, 8, 16]}, criterion=6,
            per_node_docs=2000, n_queries=200, k=10, level_dims=(16, 32, 64), train_docs=5000,
            clients=32, coordinator_workers=8, node_workers=1, min_speedup_8=5.0)
def scaling(run):
    """Weak scaling under the calibrated cost model: corpus grows with the node count."""
    per, k, dims = run["per_node_docs"], run["k"], tuple(run["level_dims"])
    sizes = sorted(run.values("n_nodes"))
    total = per * max(sizes)
    corpus = _corpus(run, total, run.seed)
    enc = _encoder(run, total, dims, run.seed, train_docs=min(run["train_docs"], total))
    levels = enc.encode(corpus.vectors)
    qs = make_queries(corpus, run["n_queries"], seed=run.seed + 1)
    ctrl = DepthController(len(dims))
    plan = fixed_plan(len(dims), k)
    cost = CostModel()

    def run_query(searcher, q):
        retrieve(q, enc, ctrl, searcher, k, plan)

    base, out = None, {}
    for N in sizes:
        n = N * per
        t0 = run.clock()
        cluster = build_cluster([lv[:n] for lv in levels], corpus.ids[:n], n_nodes=N,
                                seed=run.seed, cache_specs=None)
        try:
            profiles = profile_queries(cluster.coordinator, qs.vectors, run_query)
            hosts = [cluster.pmap.hosts(s) for s in range(N)]
        finally:
            cluster.close()
        rep = simulate(profiles, hosts, cost, node_workers=run["node_workers"],
                       coordinator_workers=run["coordinator_workers"], clients=run["clients"])
        if base is None:
            base = (N, n, rep.qps)
        scaled = rep.qps * n / base[1]  # queries per second times corpus covered, in base-corpus units
        speedup = scaled / base[2]
        eff = speedup / (N / base[0])
        out[N] = {"speedup": speedup, "efficiency": eff}
        run.row(n_docs=n, **rep.as_dict(), scaled_qps=scaled, speedup=speedup,
                efficiency=eff, calls_per_query=float(np.mean([p.n_calls for p in profiles])))
        run.timing(n_nodes=N, profile_seconds=run.clock() - t0)
    checks = {}
    if 8 in out and base[0] == 1:
        checks["speedup_8_nodes"] = out[8]["speedup"] >= run["min_speedup_8"]
    if 8 in out and 16 in out:
        checks["efficiency_16_below_8"] = out[16]["efficiency"] < out[8]["efficiency"]
    return {"checks": checks, "cost_model": cost.as_dict(),
            "speedup": {str(N): v["speedup"] for N, v in out.items()},
            "efficiency": {str(N): v["efficiency"] for N, v in out.items()}}


# -- 7. failover -------------------------------------------------------------------------

@experiment("failover", grid={"replication": [2, 1]}, criterion=7,
            n_docs=4000, n_nodes=4, n_queries=100, k=10, level_dims=(16, 32, 64), min_ratio=0.99)
def failover(run):
    """Kill each node in turn mid-run; with one copy per shard the loss must surface as an error."""
    n, N, k, dims = run["n_docs"], run["n_nodes"], run["k"], tuple(run["level_dims"])
    corpus = _corpus(run, n, run.seed)
    enc = _encoder(run, n, dims, run.seed)
    levels = enc.encode(corpus.vectors)
    qs = make_queries(corpus, run["n_queries"], seed=run.seed + 1)
    truth = oracle_batch(levels[-1], enc.encode(qs.vectors)[-1], k, corpus.ids)[0]
    ctrl = DepthController(len(dims))
    plan = fixed_plan(len(dims), k)
    half = len(qs.vectors) // 2
    checks = {}
    for point in run.points:
        R = point["replication"]
        cluster = build_cluster(levels, corpus.ids, n_nodes=N, replication=R, seed=run.seed)
        try:
            healthy = [cluster.retrieve(q, enc, ctrl, k, plan).ids for q in qs.vectors]
            healthy_recall = float(_recalls(healthy, truth, k).mean())
            if R >= 2:
                ok = True
                for node in range(N):
                    got, completed = [], 0
                    for i, q in enumerate(qs.vectors):
                        if i == half:
                            cluster.kill(node)
                        got.append(cluster.retrieve(q, enc, ctrl, k, plan).ids)
                        completed += 1
                    recall = float(_recalls(got, truth, k).mean())
                    donors = {s: [h for h in cluster.coordinator.live_hosts(s) if h != node][0]
                              for s in cluster.pmap.shards_on(node)}
                    t0 = run.clock()
                    restore_s = cluster.recover(node)
                    restored = all(cluster.nodes[node].snapshot(s) == cluster.nodes[d].snapshot(s)
                                   for s, d in donors.items())
                    after = [cluster.retrieve(q, enc, ctrl, k, plan).ids for q in qs.vectors]
                    identical = all(np.array_equal(a, b) for a, b in zip(after, healthy))
                    passed = (completed == len(qs.vectors) and recall >= run["min_ratio"] * healthy_recall
                              and restored and identical)
                    ok &= passed
                    run.row(replication=R, killed_node=node, completed=completed,
                            n_queries=len(qs.vectors), healthy_recall=healthy_recall, recall=recall,
                            recall_ratio=recall / healthy_recall if healthy_recall else 0.0,
                            recovered_bytes_identical=restored, identical_after_recovery=identical,
                            error="")
                    run.timing(replication=R, killed_node=node, restore_seconds=restore_s,
                               cycle_seconds=run.clock() - t0)
                checks["replicated_kill_any_node"] = ok
            else:
                ok = True
                for node in range(N):
                    raised, silent = 0, 0
                    cluster.kill(node)
                    for q in qs.vectors:
                        try:
                            cluster.retrieve(q, enc, ctrl, k, plan)
                            silent += 1
                        except ShardUnavailableError:
                            raised += 1
                    ok &= silent == 0
                    run.row(replication=R, killed_node=node, completed=silent, n_queries=len(qs.vectors),
                            healthy_recall=healthy_recall, error=f"ShardUnavailableError x{raised}")
                    cluster.close()
                    cluster = build_cluster(levels, corpus.ids, n_nodes=N, replication=R, seed=run.seed)
                checks["unreplicated_loss_raises"] = ok
        finally:
            cluster.close()
    return {"checks": checks}


# -- 8. streaming --------------------------------------------------------------------------

@experiment("streaming", grid={"n_inserts": [1000]}, criterion=8,
            n_docs=10000, n_nodes=4, n_queries=300, k=10, level_dims=(16, 32, 64), min_ratio=0.95)
def streaming(run):
    """Insert fresh docs into a live cluster while queries run, then compare with a rebuild."""
    n, N, k, dims = run["n_docs"], run["n_nodes"], run["k"], tuple(run["level_dims"])
    checks, failed = {}, {}
    for point in run.points:
        m = point["n_inserts"]
        corpus = _corpus(run, n + m, run.seed)
        enc = _encoder(run, n + m, dims, run.seed, train_docs=n)
        levels = enc.encode(corpus.vectors)
        qs = make_queries(corpus, run["n_queries"], seed=run.seed + 1)
        truth = oracle_batch(levels[-1], enc.encode(qs.vectors)[-1], k, corpus.ids)[0]
        ctrl = DepthController(len(dims))
        plan = fixed_plan(len(dims), k)
        live = build_cluster([lv[:n] for lv in levels], corpus.ids[:n], n_nodes=N, seed=run.seed)
        rebuilt = build_cluster(levels, corpus.ids, n_nodes=N, seed=run.seed)
        try:
            indexes = {(nd, s, lv): id(ix) for nd, rt in live.nodes.items()
                       for s, sh in rt.shards.items() for lv, ix in enumerate(sh.indexes)}
            centroids = {key: (None if ix.centroids is None else ix.centroids.copy())
                         for key, ix in _walk(live)}
            failures, during = [], [0]
            done = threading.Event()
            t0 = run.clock()

            def insert_all():
                try:
                    for j in range(n, n + m):
                        live.insert(int(corpus.ids[j]), [lv[j] for lv in levels])
                except Exception as exc:
                    failures.append(f"insert: {type(exc).__name__}: {exc}")
                finally:
                    done.set()

            writer = threading.Thread(target=insert_all)
            writer.start()
            i = 0
            while not done.is_set() or during[0] == 0:
                try:
                    live.retrieve(qs.vectors[i % len(qs.vectors)], enc, ctrl, k, plan)
                    during[0] += 1
                except Exception as exc:
                    failures.append(f"query: {type(exc).__name__}: {exc}")
                i += 1
            writer.join()
            stream_s = run.clock() - t0
            same_objects = indexes == {(nd, s, lv): id(ix) for nd, rt in live.nodes.items()
                                       for s, sh in rt.shards.items() for lv, ix in enumerate(sh.indexes)}
            same_cells = all((c is None and ix.centroids is None) or np.array_equal(c, ix.centroids)
                             for (key, ix), c in zip(_walk(live), centroids.values()))
            got_live = [live.retrieve(q, enc, ctrl, k, plan).ids for q in qs.vectors]
            got_rebuilt = [rebuilt.retrieve(q, enc, ctrl, k, plan).ids for q in qs.vectors]
        finally:
            live.close()
            rebuilt.close()
        r_live = float(_recalls(got_live, truth, k).mean())
        r_rebuilt = float(_recalls(got_rebuilt, truth, k).mean())
        indexed = sum(len(sh) for rt in live.nodes.values() for s, sh in rt.shards.items()
                      if live.pmap.hosts(s)[0] == rt.node_id)
        ok = (not failures and same_objects and same_cells and r_live >= run["min_ratio"] * r_rebuilt
              and indexed == n + m)
        checks[f"streaming_{m}"] = ok
        run.row(n_docs=n, n_inserts=m, indexed_after=indexed, query_failures=len(failures),
                no_rebuild=same_objects and same_cells, recall_streamed=r_live,
                recall_rebuilt=r_rebuilt, recall_ratio=r_live / r_rebuilt if r_rebuilt else 0.0)
        run.timing(n_inserts=m, stream_seconds=stream_s, queries_during_inserts=during[0])
        if failures:
            failed[str(m)] = failures[:5]
    return {"checks": checks, "failures": failed}


def _walk(cluster):
    for nd, rt in sorted(cluster.nodes.items()):
        for s, sh in sorted(rt.shards.items()):
            for lv, ix in enumerate(sh.indexes):
                yield (nd, s, lv), ix


# -- 9. numeric suite ----------------------------------------------------------------------

def _gradient_check(rng):
    dims, B = (3, 5, 6), 4
    d0 = dims[-1]  # the finest level blends in the source
    X = rng.normal(size=(B, d0))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    Y = X + 0.1 * rng.normal(size=X.shape)
    Y /= np.linalg.norm(Y, axis=1, keepdims=True)
    L = len(dims)
    params = EncoderParams(
        rng.normal(size=(dims[0], d0)) * 0.5,
        [rng.normal(size=(dims[i], dims[i - 1])) * 0.5 for i in range(1, L)],
        [rng.normal(size=dims[i]) * 0.1 for i in range(1, L)],
        [rng.normal(size=(dims[i], dims[0])) * 0.5 for i in range(1, L)],
        [rng.normal(size=(dims[i - 1], dims[i])) * 0.5 for i in range(1, L)],
        0.5)
    weights = LossWeights((0.2, 0.3, 0.5), 0.8, 0.01, 0.5)
    _, grads = total_loss(params, X, Y, weights)
    arrays = params.trainable()
    worst = 0.0
    h = 1e-6
    for j, a in enumerate(arrays):
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            up = [x.copy() for x in arrays]
            dn = [x.copy() for x in arrays]
            up[j][idx] += h
            dn[j][idx] -= h
            fd[idx] = (total_loss(params.with_trainable(up), X, Y, weights, False)[0]["total"]
                       - total_loss(params.with_trainable(dn), X, Y, weights, False)[0]["total"]) / (2 * h)
        worst = max(worst, float(np.linalg.norm(fd - grads[j]) / max(np.linalg.norm(fd), 1e-12)))
    return worst


def _format_blobs(rng):
    X = rng.normal(size=(300, 16))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    ids = np.arange(300, dtype=np.int64) * 3
    blobs = {}
    for spec in (IndexSpec("Flat"), IndexSpec("IVF", n_lists=8, n_probe=2),
                 IndexSpec("IVF_PQ", n_lists=8, n_probe=2, pq_subspaces=4, pq_bits=4)):
        blobs[f"index_{spec.backend}"] = (LevelIndex.build(X, ids, spec, seed=1).to_bytes(),
                                          LevelIndex.from_bytes)
    enc = ProgressiveEncoder(level_dims=(4, 8, 16), epochs=1, random_state=0).fit(X)
    blobs["encoder"] = (enc.to_bytes(), ProgressiveEncoder.from_bytes)
    lv = enc.encode(X)
    Q1 = lv[0].astype(np.float64)
    labels = np.where(query_entropy(Q1) > np.median(query_entropy(Q1)), 3, 1)
    ctrl = DepthController(n_levels=3, n_prototypes=4).fit(Q1, labels)
    blobs["controller"] = (ctrl.to_bytes(), DepthController.from_bytes)
    blobs["shard"] = (Shard.build(0, lv, ids, IndexSpec("IVF", n_lists=8, n_probe=2)).to_bytes(),
                      Shard.from_bytes)
    blobs["vectors"] = (encode_binary(X), decode_binary)
    blobs["partition_map"] = (partition(lv[0], 4, 2, seed=3, ids=ids).to_bytes(),
                              PartitionMap.from_bytes)
    return blobs


def _reencode(obj):
    return encode_binary(obj) if isinstance(obj, np.ndarray) else obj.to_bytes()


def _independent_metrics(results, truth):
    """Straight-line recomputation used to cross-check :func:`compute_metrics`."""
    r10, ndcg, mrr = [], [], []
    for q in sorted(results):
        got, rel = list(results[q][:10]), set(truth[q][:10])
        r10.append(sum(1 for d in got if d in rel) / 10.0)
        dcg = 0.0
        for pos, d in enumerate(got):
            if d in rel:
                dcg += 1.0 / math.log2(pos + 2.0)
        ndcg.append(dcg / sum(1.0 / math.log2(p + 2.0) for p in range(min(10, len(rel)))))
        first = next((pos for pos, d in enumerate(got) if d in rel), None)
        mrr.append(0.0 if first is None else 1.0 / (first + 1))
    return sum(r10) / len(r10), sum(ndcg) / len(ndcg), sum(mrr) / len(mrr)


@experiment("numeric", grid={"check": ["gradients", "ewma", "entropy", "metrics", "formats"]},
            criterion=9, gradient_tol=1e-4, oracle_tol=1e-9)
def numeric(run):
    """Gradients, load estimates, entropy, metrics and serialized formats against independent oracles."""
    checks = {}
    for point in run.points:
        name = point["check"]
        rng = np.random.default_rng([run.seed, zlib.crc32(name.encode())])
        if name == "gradients":
            err = _gradient_check(rng)
            ok = err <= run["gradient_tol"]
            run.row(check=name, error=err, tolerance=run["gradient_tol"], passed=ok)
        elif name == "ewma":
            alpha, q = 0.9, rng.integers(0, 20, size=200)
            est = 0.0
            for x in q:
                est = update_load(est, x, alpha)
            closed = (1 - alpha) * sum(alpha ** (len(q) - 1 - i) * x for i, x in enumerate(q.tolist()))
            err = abs(est - closed) / max(abs(closed), 1e-300)
            ok = err <= run["oracle_tol"]
            run.row(check=name, error=err, tolerance=run["oracle_tol"], passed=ok)
        elif name == "entropy":
            Q = rng.normal(size=(50, 16))
            got = query_entropy(Q)
            want = []
            for row in Q.tolist():
                tot = sum(v * v for v in row)
                want.append(-sum((v * v / tot) * math.log(v * v / tot) for v in row if v != 0))
            err = float(np.max(np.abs(got - np.array(want))))
            ok = err <= run["oracle_tol"]
            run.row(check=name, error=err, tolerance=run["oracle_tol"], passed=ok)
        elif name == "metrics":
            truth = {q: rng.permutation(200)[:20] for q in range(40)}
            results = {}
            for q, t in truth.items():
                mix = np.concatenate([t[:10], rng.integers(200, 400, size=10)])
                results[q] = rng.permutation(mix)[:10]
            rec = compute_metrics(results, {q: t[:10] for q, t in truth.items()})
            want = _independent_metrics(results, truth)
            got = (rec.recall_at_10, rec.ndcg_at_10, rec.mrr_at_10)
            err = float(max(abs(a - b) for a, b in zip(got, want)))
            ok = err <= run["oracle_tol"]
            run.row(check=name, error=err, tolerance=run["oracle_tol"], passed=ok)
        elif name == "formats":
            ok = True
            for fmt, (blob, load) in _format_blobs(rng).items():
                identical = _reencode(load(blob)) == blob
                bad = bytearray(blob)
                bad[len(bad) // 2] ^= 0x40
                try:
                    load(bytes(bad))
                    detected = False
                except ChecksumError:
                    detected = True
                ok &= identical and detected
                run.row(check=name, format=fmt, nbytes=len(blob), identical=identical,
                        corruption_detected=detected, passed=identical and detected)
            req = SearchRequest(2, 1, 40, rng.normal(size=16), np.arange(5, dtype=np.int64))
            frame = Frame(MsgType.SEARCH, 7, req.encode()).encode()
            rep = SearchReply(1, np.arange(3, dtype=np.int64), rng.normal(size=3), 10, 2, 0)
            frame2 = Frame(MsgType.SEARCH_RESULT, 7, rep.encode()).encode()
            same = all(decode_frame(f).encode() == f for f in (frame, frame2))
            ok &= same
            run.row(check=name, format="protocol_frames", nbytes=len(frame) + len(frame2), identical=same,
                    corruption_detected="", passed=same)
        checks[name] = bool(ok)
    return {"checks": checks}


# -- 10. determinism -------------------------------------------------------------------------

@experiment("determinism", grid={"experiment": ["exactness", "consistency", "failover", "scaling"]},
            criterion=10)
def determinism(run):
    """Rerun experiments from scratch and compare their non-timing outputs byte for byte."""
    checks = {}
    for point in run.points:
        name = point["experiment"]
        digests = []
        for _ in range(2):
            rep = run_experiment(ExperimentConfig(name, seed=run.seed), cached=False)
            digests.append((rep.rows_text("csv"), rep.summary_text()))
        same = digests[0] == digests[1]
        checks[name] = same
        run.row(experiment=name, rows_crc32=zlib.crc32(digests[0][0].encode()),
                summary_crc32=zlib.crc32(digests[0][1].encode()), identical=same)
    return {"checks": checks}


def names():
    return sorted(EXPERIMENTS)


def criterion_experiments():
    """Criterion number -> experiment name."""
    return {e.criterion: e.name for e in EXPERIMENTS.values() if e.criterion is not None}


__all__ = ["ConfigError", "ExperimentConfig", "ExperimentError", "ExperimentReport", "EXPERIMENTS",
           "clear_cache", "criterion_experiments", "names", "run_experiment"]
