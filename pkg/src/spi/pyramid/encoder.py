"""Progressive multi-resolution encoder (the semantic pyramid)."""

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .._binary import Reader, Writer
from .._validation import check_matrix, check_vector
from ..exceptions import DimensionMismatchError, TrainingDivergedWarning
from .losses import EncoderParams, LossWeights, forward, total_loss

MAGIC = b"SPIE"
VERSION = 1


@dataclass(frozen=True)
class LevelConfig:
    level: int
    dim: int
    n_levels: int


@dataclass
class PyramidEmbedding:
    doc_id: int
    levels: list

    def __len__(self):
        return len(self.levels)


@dataclass
class TrainingBatch:
    anchors: np.ndarray
    positives: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.positives = np.asarray(self.positives, dtype=np.float64)
        if self.anchors.shape != self.positives.shape:
            raise ValueError("anchors and positives must have the same shape")
        if self.anchors.shape[0] < 2:
            raise ValueError("in-batch negatives need at least 2 pairs")

    @property
    def batch_size(self):
        return self.anchors.shape[0]


def level_configs(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) < 1 or any(d <= 0 for d in dims):
        raise ValueError(f"level dims must be positive, got {dims}")
    if any(a >= b for a, b in zip(dims, dims[1:])):
        raise ValueError(f"level dims must strictly increase, got {dims}")
    return [LevelConfig(i + 1, d, len(dims)) for i, d in enumerate(dims)]


def default_dims(source_dim):
    """(16, 32, 64) for 64-dim sources, (64, 160, 384) for 384-dim ones."""
    table = {64: (16, 32, 64), 384: (64, 160, 384)}
    if source_dim in table:
        return table[source_dim]
    return (max(1, source_dim // 4), max(2, source_dim // 2), source_dim)


def _coarse_embedding(dim, d1, reducer, is_last):
    """Map that places level-1 coordinates inside level ``dim``."""
    if is_last:
        return reducer.T.copy()
    E = np.zeros((dim, d1))
    E[:d1, :d1] = np.eye(d1)
    return E


def nearest_neighbor_pairs(X, block=2048):
    """Index of each row's nearest other row by cosine (ties -> lowest index)."""
    X = np.asarray(X, dtype=np.float32)
    out = np.empty(X.shape[0], dtype=np.int64)
    for start in range(0, X.shape[0], block):
        S = X[start:start + block] @ X.T
        rows = np.arange(S.shape[0])
        S[rows, start + rows] = -np.inf
        out[start:start + block] = np.argmax(S, axis=1)
    return out


class ProgressiveEncoder(TransformerMixin, BaseEstimator):
    """Builds L-level pyramid embeddings of increasing dimension.

    Level 1 is a fixed PCA reducer of the source embedding; each finer level
    applies a trained affine refinement of the previous level plus a skip map
    of level 1, and the finest level blends in the raw source with weight
    ``fine_blend``. Training minimizes per-level in-batch InfoNCE, a
    cross-level consistency term and an L2 penalty.

    ``transform`` returns the concatenated pyramid ``[e1 | e2 | ... | eL]`` so
    the encoder composes with pipelines; use :meth:`encode` for a per-level
    list.
    """

    def __init__(self, level_dims=(16, 32, 64), fine_blend=0.5, alphas=None, beta=5.0,
                 gamma=1e-4, temperature=0.07, learning_rate=3e-4, momentum=0.9, epochs=10,
                 batch_size=256, pair_mode="neighbor", pair_noise=0.05,
                 validation_fraction=0.1, init_scale=0.05, proj_init="lstsq", proj_ridge=1e-4,
                 random_state=0):
        self.level_dims = level_dims
        self.fine_blend = fine_blend
        self.alphas = alphas
        self.beta = beta
        self.gamma = gamma
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.pair_mode = pair_mode
        self.pair_noise = pair_noise
        self.validation_fraction = validation_fraction
        self.init_scale = init_scale
        self.proj_init = proj_init
        self.proj_ridge = proj_ridge
        self.random_state = random_state

    # -- construction -------------------------------------------------------
    def _weights(self, n_levels):
        alphas = self.alphas if self.alphas is not None else (1.0 / n_levels,) * n_levels
        return LossWeights(alphas, self.beta, self.gamma, self.temperature)

    def _fit_reducer(self, X, d1, rng):
        if X.shape[0] >= 10 * d1:
            sample = X if X.shape[0] <= 5000 else X[rng.choice(X.shape[0], 5000, replace=False)]
            centered = sample - sample.mean(axis=0)
            _, _, Vt = np.linalg.svd(centered, full_matrices=False)
            R = Vt[:d1].copy()
            # deterministic sign: largest-magnitude coordinate positive
            flip = np.sign(R[np.arange(d1), np.argmax(np.abs(R), axis=1)])
            return R * flip[:, None]
        R = rng.normal(size=(d1, X.shape[1])) / np.sqrt(X.shape[1])
        return R

    def _init_params(self, reducer, dims, rng):
        L = len(dims)
        d1 = dims[0]
        coarse = [_coarse_embedding(d, d1, reducer, i == L - 1) for i, d in enumerate(dims)]
        refine, bias, skip, proj = [], [], [], []
        for lv in range(1, L):
            F = rng.normal(scale=self.init_scale / np.sqrt(dims[lv - 1]), size=(dims[lv], dims[lv - 1]))
            refine.append(F)
            bias.append(np.zeros(dims[lv]))
            skip.append(coarse[lv].copy())
        for lv in range(L - 1):
            P = rng.normal(scale=self.init_scale / np.sqrt(dims[lv + 1]), size=(dims[lv], dims[lv + 1]))
            proj.append(P)
        return EncoderParams(reducer, refine, bias, skip, proj, float(self.fine_blend))

    def _warm_start_proj(self, params, X):
        # ridge least squares P_l so proj_l(e_{l+1}) ~ e_l on the initial pyramid;
        # the penalty keeps P_l bounded when finer levels are nearly low-rank
        levels = forward(params, X).levels
        proj = []
        for lv in range(params.n_levels - 1):
            A, B = levels[lv + 1], levels[lv]
            G = A.T @ A + self.proj_ridge * A.shape[0] * np.eye(A.shape[1])
            proj.append(np.linalg.solve(G, A.T @ B).T)
        return EncoderParams(params.reducer, params.refine, params.bias, params.skip, proj,
                             params.blend)

    @classmethod
    def from_params(cls, params, **kwargs):
        """Wrap explicit parameters (no training) in a fitted encoder."""
        est = cls(level_dims=params.dims, fine_blend=params.blend, **kwargs)
        est.params_ = params.copy(np.float32)
        est.params_.blend = float(params.blend)
        est.n_features_in_ = params.reducer.shape[1]
        est.history_ = []
        est.diverged_ = False
        return est

    # -- training -----------------------------------------------------------
    def _pairs(self, X, idx, neighbors, rng):
        anchors = X[idx]
        if self.pair_mode == "neighbor":
            positives = X[neighbors[idx]]
        elif self.pair_mode == "noise":
            positives = anchors + rng.normal(scale=self.pair_noise, size=anchors.shape)
            positives /= np.linalg.norm(positives, axis=1, keepdims=True)
        else:
            raise ValueError(f"unknown pair_mode {self.pair_mode!r}")
        return anchors, positives

    def fit(self, X, y=None, pairs=None):
        """Train on corpus ``X``.

        ``pairs`` optionally supplies an iterable of :class:`TrainingBatch`
        replayed each epoch; otherwise pairs are drawn from ``X`` itself.
        """
        dims = tuple(c.dim for c in level_configs(self.level_dims))
        if len(dims) > 1:
            X = check_matrix(X, dim=dims[-1], name="corpus")
        else:
            X = check_matrix(X, name="corpus")
            if X.shape[1] < dims[0]:
                raise DimensionMismatchError("corpus", f">= {dims[0]}", X.shape[1])
        if not 0.0 <= self.fine_blend <= 1.0:
            raise ValueError("fine_blend must lie in [0, 1]")
        weights = self._weights(len(dims))
        rng = np.random.default_rng(self.random_state)
        params = self._init_params(self._fit_reducer(X, dims[0], rng), dims, rng)
        self.n_features_in_ = X.shape[1]

        n = X.shape[0]
        perm = rng.permutation(n)
        n_val = int(round(self.validation_fraction * n)) if n >= 20 else 0
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        self.holdout_index_ = np.sort(val_idx)
        if self.proj_init == "lstsq":
            sample = train_idx if len(train_idx) <= 5000 else train_idx[:5000]
            params = self._warm_start_proj(params, X[sample])
        elif self.proj_init != "random":
            raise ValueError(f"unknown proj_init {self.proj_init!r}")
        neighbors = nearest_neighbor_pairs(X) if (pairs is None and self.pair_mode == "neighbor") else None
        val_rng = np.random.default_rng(self.random_state + 1)
        val_pairs = self._pairs(X, val_idx, neighbors, val_rng) if (pairs is None and n_val >= 2) else None

        def holdout(p):
            if val_pairs is None:
                return float("nan")
            return total_loss(p, *val_pairs, weights, with_grad=False)[0]["total"]

        self.initial_holdout_loss_ = holdout(params)
        velocity = [np.zeros_like(a) for a in params.trainable()]
        history = []
        self.diverged_ = False
        last_good = params.copy()
        for epoch in range(1, self.epochs + 1):
            sums = None
            count = 0
            for anchors, positives in self._batches(X, train_idx, neighbors, rng, pairs):
                comps, grads = total_loss(params, anchors, positives, weights)
                if not np.isfinite(comps["total"]) or not all(np.all(np.isfinite(g)) for g in grads):
                    self.diverged_ = True
                    break
                arrays = params.trainable()
                for j, g in enumerate(grads):
                    velocity[j] = self.momentum * velocity[j] - self.learning_rate * g
                    arrays[j] = arrays[j] + velocity[j]
                params = params.with_trainable(arrays)
                flat = [*comps["retrieval"], comps["consistency"], comps["reg"], comps["total"]]
                sums = np.array(flat) if sums is None else sums + flat
                count += 1
            if self.diverged_ or count == 0:
                break
            means = sums / count
            val = holdout(params)
            if not np.isfinite(val) and val_pairs is not None:
                self.diverged_ = True
                break
            last_good = params.copy()
            row = {"epoch": epoch}
            for lv in range(len(dims)):
                row[f"retrieval_{lv + 1}"] = float(means[lv])
            row.update(consistency=float(means[-3]), reg=float(means[-2]), total=float(means[-1]),
                       holdout_total=val)
            history.append(row)
        if self.diverged_:
            warnings.warn("training loss became non-finite; keeping the last finite parameters",
                          TrainingDivergedWarning, stacklevel=2)
            params = last_good
        self.params_ = params.copy(np.float32)
        self.params_.blend = float(self.fine_blend)
        self.history_ = history
        self.final_holdout_loss_ = holdout(self.params_)
        return self

    def _batches(self, X, train_idx, neighbors, rng, pairs):
        if pairs is not None:
            for batch in pairs:
                if not isinstance(batch, TrainingBatch):
                    batch = TrainingBatch(*batch)
                yield batch.anchors, batch.positives
            return
        order = rng.permutation(train_idx)
        bs = max(2, int(self.batch_size))
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            yield self._pairs(X, idx, neighbors, rng)

    # -- inference ----------------------------------------------------------
    @property
    def dims_(self):
        check_is_fitted(self, "params_")
        return self.params_.dims

    @property
    def source_dim_(self):
        check_is_fitted(self, "params_")
        return self.params_.reducer.shape[1]

    @property
    def n_levels_(self):
        return len(self.dims_)

    def encode(self, X, max_level=None):
        """Per-level float32 embeddings of the rows of ``X``."""
        check_is_fitted(self, "params_")
        X = check_matrix(X, dim=self.source_dim_, name="source")
        levels = forward(self.params_, X).levels
        if max_level is not None:
            levels = levels[:max_level]
        return [e.astype(np.float32) for e in levels]

    def transform(self, X):
        return np.hstack(self.encode(X))

    def split_levels(self, Z):
        bounds = np.cumsum(self.dims_)[:-1]
        return np.split(np.asarray(Z), bounds, axis=1)

    def build_pyramid(self, source, doc_id=0):
        check_is_fitted(self, "params_")
        source = check_vector(source, name="source")
        if source.shape[0] != self.source_dim_:
            raise DimensionMismatchError("source", self.source_dim_, source.shape[0])
        levels = [e[0] for e in self.encode(source[None, :])]
        return PyramidEmbedding(doc_id, levels)

    def project(self, vectors, from_level, to_level):
        """Apply proj_{to} o ... o proj_{from-1} to level-``from_level`` rows."""
        check_is_fitted(self, "params_")
        if not 1 <= to_level <= from_level <= self.n_levels_:
            raise ValueError("need 1 <= to_level <= from_level <= L")
        out = np.asarray(vectors, dtype=np.float64)
        for lv in range(from_level - 1, to_level - 1, -1):
            out = out @ self.params_.proj[lv - 1].T.astype(np.float64)
        return out

    def history_csv(self):
        buf = io.StringIO()
        if not self.history_:
            return ""
        writer = csv.DictWriter(buf, fieldnames=list(self.history_[0]), lineterminator="\n")
        writer.writeheader()
        for row in self.history_:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    # -- checkpoint ---------------------------------------------------------
    def to_bytes(self):
        check_is_fitted(self, "params_")
        p = self.params_
        w = Writer(MAGIC, VERSION)
        w.pack("H", p.n_levels)
        w.pack(f"{p.n_levels}I", *p.dims)
        w.pack("I", p.reducer.shape[1])
        w.pack("d", p.blend)
        w.array(p.reducer, "f4")
        for F, b, W in zip(p.refine, p.bias, p.skip):
            w.array(F, "f4")
            w.array(b, "f4")
            w.array(W, "f4")
        for P in p.proj:
            w.array(P, "f4")
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data):
        r = Reader(data, MAGIC)
        (L,) = r.unpack("H")
        dims = r.unpack(f"{L}I")
        (source_dim,) = r.unpack("I")
        (blend,) = r.unpack("d")
        reducer = r.array("f4", (dims[0], source_dim))
        refine, bias, skip, proj = [], [], [], []
        for lv in range(1, L):
            refine.append(r.array("f4", (dims[lv], dims[lv - 1])))
            bias.append(r.array("f4", (dims[lv],)))
            skip.append(r.array("f4", (dims[lv], dims[0])))
        for lv in range(L - 1):
            proj.append(r.array("f4", (dims[lv], dims[lv + 1])))
        r.done()
        return cls.from_params(EncoderParams(reducer, refine, bias, skip, proj, blend))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
