"""Exact brute-force top-K, the ground truth for every recall metric."""

import numpy as np

from .._topk import topk_order
from .._validation import check_ids


def exact_scores(vectors, query):
    # same row-wise reduction as the Flat index, so scores agree bit for bit
    return np.sum(np.asarray(vectors, dtype=np.float32).astype(np.float64)
                  * np.asarray(query, dtype=np.float64), axis=1)


def oracle_topk(vectors, query, k, ids=None):
    """Exact cosine top-``k`` of ``query`` over unit ``vectors``; returns ``(ids, scores)``."""
    vectors = np.asarray(vectors)
    ids = check_ids(ids, vectors.shape[0])
    if k > vectors.shape[0]:
        raise ValueError(f"K={k} exceeds corpus size {vectors.shape[0]}")
    scores = exact_scores(vectors, query)
    pos = topk_order(scores, ids, k)
    return ids[pos], scores[pos]


def oracle_batch(vectors, queries, k, ids=None):
    """Row-aligned ``(n_queries, k)`` arrays of oracle ids and scores."""
    vectors = np.asarray(vectors)
    ids = check_ids(ids, vectors.shape[0])
    out_ids = np.empty((len(queries), k), dtype=np.int64)
    out_scores = np.empty((len(queries), k))
    for i, q in enumerate(queries):
        out_ids[i], out_scores[i] = oracle_topk(vectors, q, k, ids)
    return out_ids, out_scores
