"""Merging per-node candidate lists."""

from dataclasses import dataclass

import numpy as np

from .._topk import topk_order


@dataclass
class CandidateSet:
    level: int
    ids: np.ndarray
    scores: np.ndarray
    budget: int

    def __len__(self):
        return len(self.ids)


def aggregate(partials, budget, level=1):
    """Union of ``(ids, scores)`` partials, deduplicated by max score, truncated to ``budget``.

    ``partials`` may hold :class:`SearchResult` objects or ``(ids, scores)`` pairs.
    """
    ids_parts, score_parts = [], []
    for p in partials:
        ids, scores = (p.ids, p.scores) if hasattr(p, "ids") else p
        ids_parts.append(np.asarray(ids, dtype=np.int64))
        score_parts.append(np.asarray(scores, dtype=np.float64))
    if not ids_parts:
        return CandidateSet(level, np.empty(0, np.int64), np.empty(0), budget)
    ids = np.concatenate(ids_parts)
    scores = np.concatenate(score_parts)
    if ids.size:
        order = np.lexsort((-scores, ids))
        ids, scores = ids[order], scores[order]
        first = np.ones(ids.size, dtype=bool)
        first[1:] = ids[1:] != ids[:-1]
        ids, scores = ids[first], scores[first]
    pos = topk_order(scores, ids, budget)
    return CandidateSet(level, ids[pos], scores[pos], budget)
