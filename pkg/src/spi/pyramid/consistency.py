"""How well coarse levels agree with what finer levels project down to."""

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .._topk import topk_order


@dataclass
class ConsistencyReport:
    lo: int
    hi: int
    rho: float  # mean cosine between level-lo vectors and projected level-hi vectors
    drift: float
    recall_preservation: float  # mean top-K overlap between the two levels' neighbour sets
    max_sq_deviation: float  # epsilon: worst squared distance between unit vectors
    mean_sq_deviation: float
    bound: float  # 1 - epsilon / 2, a lower bound on rho for unit vectors
    n_docs: int
    n_excluded: int

    @property
    def bound_holds(self):
        return self.rho >= self.bound - 1e-12

    def as_dict(self):
        d = asdict(self)
        d["bound_holds"] = self.bound_holds
        return d


def neighbor_sets(queries, corpus, k, exclude=None):
    """Top-``k`` corpus rows per query row; ``exclude[i]`` drops row ``i``'s own index."""
    corpus = np.asarray(corpus, dtype=np.float64)
    ids = np.arange(corpus.shape[0])
    out = np.empty((len(queries), k), dtype=np.int64)
    for i, q in enumerate(np.asarray(queries, dtype=np.float64)):
        scores = corpus @ q
        if exclude is not None:
            scores[exclude[i]] = -np.inf
        out[i] = ids[topk_order(scores, ids, k)]
    return out


def overlap(a, b):
    """Mean fraction of shared entries between aligned rows of two id matrices."""
    k = a.shape[1]
    return float(np.mean([len(set(x.tolist()) & set(y.tolist())) / k for x, y in zip(a, b)]))


def semantic_consistency(encoder, levels, lo, hi, rows=None, k=10):
    """Consistency between levels ``lo < hi`` of an encoded corpus.

    ``levels`` is the encoder output for the whole corpus. ``rows`` picks
    the documents to measure (default: all); their neighbours are searched
    in the full corpus, excluding themselves. Zero-norm projections are
    dropped from the means and counted in ``n_excluded``.
    """
    if not 1 <= lo < hi <= len(levels):
        raise ValueError(f"need 1 <= lo < hi <= {len(levels)}")
    n = levels[0].shape[0]
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("no documents to measure")
    a = levels[lo - 1][rows].astype(np.float64)
    b = encoder.project(levels[hi - 1][rows], hi, lo)
    a_norm = np.linalg.norm(a, axis=1)
    b_norm = np.linalg.norm(b, axis=1)
    keep = (a_norm > 0) & (b_norm > 0)
    excluded = int(np.count_nonzero(~keep))
    if excluded:
        warnings.warn(f"{excluded} zero-norm vector(s) excluded from consistency", RuntimeWarning,
                      stacklevel=2)
    a_unit = a[keep] / a_norm[keep, None]
    b_unit = b[keep] / b_norm[keep, None]
    cos = np.sum(a_unit * b_unit, axis=1)
    sq = np.sum((a_unit - b_unit) ** 2, axis=1)
    rho = float(np.mean(cos))
    eps = float(sq.max())
    k = min(k, n - 1)
    na = neighbor_sets(levels[lo - 1][rows], levels[lo - 1], k, exclude=rows)
    nb = neighbor_sets(levels[hi - 1][rows], levels[hi - 1], k, exclude=rows)
    return ConsistencyReport(lo, hi, rho, 1.0 - rho, overlap(na, nb), eps, float(sq.mean()),
                             1.0 - eps / 2.0, int(keep.sum()), excluded)
