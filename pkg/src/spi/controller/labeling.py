"""Oracle labeling of the cheapest sufficient retrieval depth."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .depth import fixed_plan
from .entropy import query_entropy


@dataclass
class LabeledQueries:
    query_ids: np.ndarray
    coarse: np.ndarray  # level-1 query vectors
    labels: np.ndarray
    entropy: np.ndarray
    recalls: np.ndarray  # (n_queries, n_levels) recall@K at each full depth

    @property
    def n_levels(self):
        return self.recalls.shape[1]

    def histogram(self):
        return np.bincount(self.labels, minlength=self.n_levels + 1)[1:]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "label", "entropy"] + [f"recall_{lv + 1}" for lv in range(self.n_levels)])
        for qid, lab, h, rec in zip(self.query_ids, self.labels, self.entropy, self.recalls):
            w.writerow([int(qid), int(lab), f"{h:.10g}"] + [f"{r:.10g}" for r in rec])
        return buf.getvalue()


def depth_labels(recalls, tau=0.98):
    """Smallest level whose recall reaches ``tau`` times the full-depth recall."""
    recalls = np.asarray(recalls, dtype=np.float64)
    ok = recalls >= tau * recalls[:, -1:] - 1e-12
    return np.argmax(ok, axis=1) + 1


def label_queries(system, queries, truth, k=10, tau=0.98, query_ids=None):
    """Retrieve each query at every fixed depth and label it by the cheapest sufficient one.

    ``system`` exposes ``retrieve(query, k, plan)``, ``encoder_`` and
    ``n_levels_``; ``truth`` holds the exact top-``k`` ids per query.
    """
    if truth is None:
        raise ValueError("labeling needs exact ground truth")
    queries = np.asarray(queries, dtype=np.float64)
    truth = np.asarray(truth)
    if truth.shape[0] != queries.shape[0]:
        raise ValueError("truth must have one row per query")
    n_levels = system.n_levels_
    recalls = np.zeros((queries.shape[0], n_levels))
    for lv in range(1, n_levels + 1):
        plan = fixed_plan(lv, k)
        for i, q in enumerate(queries):
            got = system.retrieve(q, k, plan).ids
            recalls[i, lv - 1] = len(set(got.tolist()) & set(truth[i, :k].tolist())) / k
    coarse = system.encoder_.encode(queries, max_level=1)[0].astype(np.float64)
    ids = np.arange(len(queries)) if query_ids is None else np.asarray(query_ids)
    return LabeledQueries(ids, coarse, depth_labels(recalls, tau), query_entropy(coarse), recalls)
