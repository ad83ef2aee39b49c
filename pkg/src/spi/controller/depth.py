"""Depth controllers: per-query retrieval depth with uncertainty escalation."""

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from .._binary import Reader, Writer
from .._validation import check_matrix
from ..index.kmeans import kmeans
from .entropy import query_entropy

MAGIC = b"SPIC"
VERSION = 1
_MODES = ("fixed", "constant", "trained")


def budget_schedule(k, final_level, base_factor=32, shrink=4):
    """Candidate budgets ``N_l = max(K, ceil(base_factor * K / shrink ** (l - 1)))``."""
    if k < 1:
        raise ValueError("K must be at least 1")
    n1 = base_factor * k
    return tuple(max(k, math.ceil(n1 / shrink ** lv)) for lv in range(final_level))


@dataclass(frozen=True)
class QueryPlan:
    predicted: int
    sigma: float
    final: int
    budgets: tuple = field(default=())

    def __post_init__(self):
        if not 1 <= self.predicted <= self.final:
            raise ValueError("need 1 <= predicted <= final")
        if self.final - self.predicted not in (0, 1):
            raise ValueError("final depth may exceed the prediction by at most one level")
        if len(self.budgets) != self.final:
            raise ValueError(f"expected {self.final} budgets, got {len(self.budgets)}")
        if any(b < 1 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if any(a < b for a, b in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budgets must be nonincreasing with level")


def fixed_plan(level, k, budgets=None, base_factor=32, shrink=4):
    """Plan that retrieves to ``level`` with the default or explicit budgets."""
    if budgets is None:
        budgets = budget_schedule(k, level, base_factor, shrink)
    return QueryPlan(level, 0.0, level, tuple(int(b) for b in budgets))


def escalate(predicted, sigma, threshold, n_levels):
    return predicted if sigma <= threshold else min(predicted + 1, n_levels)


def merge_rare_classes(labels, n_levels, min_count=10):
    """Map each label to a class with at least ``min_count`` examples.

    Rare classes fold into the next larger present class; a rare top class
    folds downward. Returns the remapped labels.
    """
    labels = np.asarray(labels, dtype=np.int64).copy()
    while True:
        present, counts = np.unique(labels, return_counts=True)
        rare = present[counts < min_count]
        if rare.size == 0 or present.size == 1:
            return labels
        c = int(rare[0])
        higher = present[present > c]
        target = int(higher[0]) if higher.size else int(present[present < c][-1])
        labels[labels == c] = target


class DepthController(ClassifierMixin, BaseEstimator):
    """Multinomial logistic depth classifier over ``[q1 ; H(q1)]``.

    ``n_prototypes > 0`` appends the cosine similarity to that many k-means
    prototypes of the training queries' coarse vectors, giving the linear
    model a nonlinear view of where a query sits relative to the clusters.

    Unfitted, :meth:`plan` falls back to full depth for every query.
    """

    def __init__(self, n_levels=3, threshold=0.4, C=1.0, max_iter=500, n_prototypes=0,
                 min_class_count=10, base_factor=32, shrink=4, random_state=0):
        self.n_levels = n_levels
        self.threshold = threshold
        self.C = C
        self.max_iter = max_iter
        self.n_prototypes = n_prototypes
        self.min_class_count = min_class_count
        self.base_factor = base_factor
        self.shrink = shrink
        self.random_state = random_state

    # -- features -----------------------------------------------------------
    def features(self, Q1):
        Q1 = np.atleast_2d(np.asarray(Q1, dtype=np.float64))
        H = np.atleast_1d(query_entropy(Q1))[:, None]
        parts = [Q1, H]
        protos = getattr(self, "prototypes_", None)
        if protos is not None and protos.shape[0]:
            norms = np.linalg.norm(Q1, axis=1, keepdims=True)
            parts.append((Q1 / norms) @ protos.T)
        return np.hstack(parts)

    # -- training -----------------------------------------------------------
    def fit(self, Q1, labels):
        Q1 = check_matrix(Q1, name="coarse queries")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (Q1.shape[0],):
            raise ValueError("labels must align with the query rows")
        if labels.min() < 1 or labels.max() > self.n_levels:
            raise ValueError(f"labels must lie in 1..{self.n_levels}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        self.n_features_in_ = Q1.shape[1]
        merged = merge_rare_classes(labels, self.n_levels, self.min_class_count)
        self.label_map_ = {int(a): int(b) for a, b in zip(labels, merged)}
        self.prototypes_ = None
        if self.n_prototypes > 0:
            unit = Q1 / np.linalg.norm(Q1, axis=1, keepdims=True)
            k = min(self.n_prototypes, Q1.shape[0])
            self.prototypes_ = kmeans(unit, k, seed=self.random_state).centroids
        classes = np.unique(merged)
        self.classes_ = classes
        if classes.size == 1:
            self.mode_ = "constant"
            self.feature_mean_ = np.zeros(self.features(Q1[:1]).shape[1])
            self.feature_scale_ = np.ones_like(self.feature_mean_)
            self.coef_ = np.zeros((1, self.feature_mean_.size))
            self.intercept_ = np.zeros(1)
            return self
        F = self.features(Q1)
        self.feature_mean_ = F.mean(axis=0)
        scale = F.std(axis=0)
        self.feature_scale_ = np.where(scale > 0, scale, 1.0)
        Z = (F - self.feature_mean_) / self.feature_scale_
        clf = LogisticRegression(C=self.C, max_iter=self.max_iter, random_state=self.random_state)
        clf.fit(Z, merged)
        if classes.size == 2:
            # binary sklearn model -> symmetric softmax logits
            w, b = clf.coef_[0], clf.intercept_[0]
            self.coef_ = np.vstack([-w / 2, w / 2])
            self.intercept_ = np.array([-b / 2, b / 2])
        else:
            self.coef_ = clf.coef_.copy()
            self.intercept_ = clf.intercept_.copy()
        self.mode_ = "trained"
        return self

    # -- inference ----------------------------------------------------------
    @property
    def is_trained(self):
        return getattr(self, "mode_", "fixed") != "fixed"

    def class_probabilities(self, Q1):
        """Distribution over levels ``1..n_levels`` for each row."""
        Q1 = np.atleast_2d(np.asarray(Q1, dtype=np.float64))
        out = np.zeros((Q1.shape[0], self.n_levels))
        mode = getattr(self, "mode_", "fixed")
        if mode == "fixed":
            out[:, self.n_levels - 1] = 1.0
            return out
        if mode == "constant":
            out[:, self.classes_[0] - 1] = 1.0
            return out
        Z = (self.features(Q1) - self.feature_mean_) / self.feature_scale_
        logits = Z @ self.coef_.T + self.intercept_
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        out[:, self.classes_ - 1] = p
        return out

    predict_proba = class_probabilities

    def predict(self, Q1):
        return self.class_probabilities(Q1).argmax(axis=1) + 1

    def plan(self, q1, k, threshold=None):
        threshold = self.threshold if threshold is None else threshold
        p = self.class_probabilities(q1)[0]
        predicted = int(np.argmax(p)) + 1
        sigma = float(max(0.0, 1.0 - p.max()))
        final = escalate(predicted, sigma, threshold, self.n_levels)
        return QueryPlan(predicted, sigma, final,
                         budget_schedule(k, final, self.base_factor, self.shrink))

    # -- persistence --------------------------------------------------------
    def to_bytes(self):
        w = Writer(MAGIC, VERSION)
        mode = getattr(self, "mode_", "fixed")
        w.pack("BHdHH", _MODES.index(mode), self.n_levels, float(self.threshold),
               int(self.base_factor), int(self.shrink))
        if mode == "fixed":
            return w.getvalue()
        protos = self.prototypes_ if self.prototypes_ is not None else np.zeros((0, self.n_features_in_))
        w.pack("IIH", self.n_features_in_, protos.shape[0], self.classes_.size)
        w.array(self.classes_, "u2")
        w.array(protos, "f8")
        w.array(self.feature_mean_, "f8")
        w.array(self.feature_scale_, "f8")
        w.array(self.coef_, "f8")
        w.array(self.intercept_, "f8")
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data):
        r = Reader(data, MAGIC, (VERSION,))
        mode, n_levels, threshold, base_factor, shrink = r.unpack("BHdHH")
        est = cls(n_levels=n_levels, threshold=threshold, base_factor=base_factor, shrink=shrink)
        if _MODES[mode] == "fixed":
            r.done()
            return est
        n_in, n_protos, n_classes = r.unpack("IIH")
        est.mode_ = _MODES[mode]
        est.n_features_in_ = n_in
        est.classes_ = r.array("u2", (n_classes,)).astype(np.int64)
        protos = r.array("f8", (n_protos, n_in))
        est.prototypes_ = protos if n_protos else None
        est.n_prototypes = n_protos
        n_feat = n_in + 1 + n_protos
        est.feature_mean_ = r.array("f8", (n_feat,))
        est.feature_scale_ = r.array("f8", (n_feat,))
        rows = 1 if est.mode_ == "constant" else n_classes
        est.coef_ = r.array("f8", (rows, n_feat))
        est.intercept_ = r.array("f8", (rows,))
        r.done()
        return est

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


class RandomDepthController:
    """Draws the depth from a fixed level distribution, independent of the query.

    The draw is seeded by the query bytes so plans are reproducible and
    order-independent. Pass the adaptive controller's depth histogram as
    ``level_probs`` to compare at matched cost.
    """

    def __init__(self, n_levels=3, level_probs=None, seed=0, base_factor=32, shrink=4):
        probs = np.full(n_levels, 1.0 / n_levels) if level_probs is None else np.asarray(level_probs, float)
        if probs.shape != (n_levels,) or np.any(probs < 0) or probs.sum() <= 0:
            raise ValueError("level_probs must be a nonnegative vector over the levels")
        self.n_levels = n_levels
        self.level_probs = probs / probs.sum()
        self.seed = seed
        self.base_factor = base_factor
        self.shrink = shrink

    def plan(self, q1, k, threshold=None):
        q = np.ascontiguousarray(np.asarray(q1, dtype=np.float64).ravel())
        rng = np.random.default_rng([self.seed, zlib.crc32(q.tobytes())])
        level = int(rng.choice(self.n_levels, p=self.level_probs)) + 1
        return fixed_plan(level, k, base_factor=self.base_factor, shrink=self.shrink)


class FixedDepthController:
    def __init__(self, level, base_factor=32, shrink=4):
        self.level = level
        self.n_levels = level
        self.base_factor = base_factor
        self.shrink = shrink

    def plan(self, q1, k, threshold=None):
        return fixed_plan(self.level, k, base_factor=self.base_factor, shrink=self.shrink)


def train_controller(Q1, labels, n_levels=3, threshold=0.4, test_size=0.3, epochs=500,
                     random_state=0, **kwargs):
    """Fit on a stratified split and report held-out accuracy.

    Returns ``(controller, report)``; ``report`` has ``accuracy``,
    ``prior_baseline`` and the number of held-out rows.
    """
    Q1 = check_matrix(Q1, name="coarse queries")
    labels = np.asarray(labels, dtype=np.int64)
    merged = merge_rare_classes(labels, n_levels, kwargs.get("min_class_count", 10))
    counts = np.unique(merged, return_counts=True)[1]
    strat = merged if counts.size > 1 and counts.min() >= 2 else None
    try:
        tr, te = train_test_split(np.arange(len(labels)), test_size=test_size,
                                  random_state=random_state, stratify=strat)
    except ValueError:
        tr, te = train_test_split(np.arange(len(labels)), test_size=test_size,
                                  random_state=random_state)
    ctrl = DepthController(n_levels=n_levels, threshold=threshold, max_iter=epochs,
                           random_state=random_state, **kwargs).fit(Q1[tr], labels[tr])
    pred = ctrl.predict(Q1[te])
    truth = merged[te]
    prior = np.bincount(merged[tr]).max() / len(tr)
    report = {"accuracy": float(np.mean(pred == truth)), "prior_baseline": float(prior),
              "n_test": int(len(te))}
    return ctrl, report
