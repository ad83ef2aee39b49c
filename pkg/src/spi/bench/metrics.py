"""Retrieval quality and latency metrics."""

from dataclasses import asdict, dataclass

import numpy as np

RECALL_KS = (1, 5, 10, 20)


def recall_at_k(result, truth, k):
    """``|result[:k] & truth[:k]| / k``."""
    return len(set(np.asarray(result)[:k].tolist()) & set(np.asarray(truth)[:k].tolist())) / k


def ndcg_at_k(result, truth, k=10):
    """Binary-gain NDCG with log2 discounts; relevant = the true top ``k``."""
    relevant = set(np.asarray(truth)[:k].tolist())
    if not relevant:
        return 0.0
    gains = [1.0 if d in relevant else 0.0 for d in np.asarray(result)[:k].tolist()]
    dcg = sum(g / np.log2(r + 2) for r, g in enumerate(gains))
    ideal = sum(1.0 / np.log2(r + 2) for r in range(min(len(relevant), k)))
    return float(dcg / ideal)


def mrr_at_k(result, truth, k=10):
    relevant = set(np.asarray(truth)[:k].tolist())
    for rank, d in enumerate(np.asarray(result)[:k].tolist(), start=1):
        if d in relevant:
            return 1.0 / rank
    return 0.0


@dataclass
class MetricsRecord:
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    recall_at_20: float
    ndcg_at_10: float
    mrr_at_10: float
    mean_latency_ms: float
    p50_latency_ms: float
    p99_latency_ms: float
    qps: float
    index_bytes: int
    scored_vectors: float
    n_queries: int
    n_excluded: int

    def as_dict(self):
        return asdict(self)

    TIMING_FIELDS = ("mean_latency_ms", "p50_latency_ms", "p99_latency_ms", "qps")


def compute_metrics(results, truth, timings=None, costs=None, index_bytes=0, wall_seconds=None):
    """Aggregate per-query metrics.

    ``results`` and ``truth`` map query id to ranked id arrays (truth must
    hold at least 20 ids for recall@20; shorter truth caps that recall's
    denominator at the truth length). Queries without truth are excluded
    and counted. ``timings`` maps query id to seconds.
    """
    qids = [q for q in results if q in truth]
    excluded = len(results) - len(qids)
    if not qids:
        raise ValueError("no query has ground truth")
    rec = {k: [] for k in RECALL_KS}
    ndcg, mrr = [], []
    for q in qids:
        r, t = results[q], truth[q]
        for k in RECALL_KS:
            kk = min(k, len(t))
            rec[k].append(recall_at_k(r, t, kk) if kk else 0.0)
        ndcg.append(ndcg_at_k(r, t, 10))
        mrr.append(mrr_at_k(r, t, 10))
    lat = np.array([timings[q] for q in qids]) * 1e3 if timings else np.zeros(1)
    if wall_seconds is None:
        wall_seconds = lat.sum() / 1e3 if timings else 0.0
    qps = len(qids) / wall_seconds if wall_seconds > 0 else 0.0
    cost = float(np.mean([costs[q] for q in qids])) if costs else 0.0
    return MetricsRecord(
        recall_at_1=float(np.mean(rec[1])), recall_at_5=float(np.mean(rec[5])),
        recall_at_10=float(np.mean(rec[10])), recall_at_20=float(np.mean(rec[20])),
        ndcg_at_10=float(np.mean(ndcg)), mrr_at_10=float(np.mean(mrr)),
        mean_latency_ms=float(lat.mean()), p50_latency_ms=float(np.percentile(lat, 50)),
        p99_latency_ms=float(np.percentile(lat, 99)), qps=float(qps),
        index_bytes=int(index_bytes), scored_vectors=cost, n_queries=len(qids),
        n_excluded=excluded)
