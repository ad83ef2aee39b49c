"""Top-k selection under the package-wide tie rule.

Every ranking in the package orders by descending score, then ascending
doc id, so results are reproducible bit for bit.
"""

import numpy as np


def topk_order(scores, ids, k):
    """Positions of the ``k`` best entries, best first."""
    scores = np.asarray(scores)
    ids = np.asarray(ids)
    n = scores.shape[0]
    if k <= 0 or n == 0:
        return np.empty(0, dtype=np.intp)
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        threshold = scores[part].min()
        # keep every tie at the cutoff so the id rule decides among them
        cand = np.flatnonzero(scores >= threshold)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:k]]


def topk(scores, ids, k):
    """Return ``(ids, scores)`` of the ``k`` best entries, best first."""
    pos = topk_order(scores, ids, k)
    return np.asarray(ids)[pos], np.asarray(scores)[pos]
