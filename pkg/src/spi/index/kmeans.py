"""Seeded Lloyd k-means with k-means++ initialization."""

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int


def squared_distances(X, C):
    """Pairwise squared Euclidean distances, clipped at zero."""
    d = (np.einsum("ij,ij->i", X, X)[:, None] - 2.0 * (X @ C.T)
         + np.einsum("ij,ij->i", C, C)[None, :])
    return np.maximum(d, 0.0, out=d)


def assign(X, C):
    """Nearest centroid per row; ties go to the lowest centroid index."""
    d = squared_distances(X, C)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(X.shape[0]), labels]


def kmeans_plusplus(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = squared_distances(X, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining mass sits on chosen centers; fall back to uniform picks
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = X[idx]
        closest = np.minimum(closest, squared_distances(X, centers[i:i + 1])[:, 0])
    return centers


def kmeans(X, k, seed=0, max_iter=25, tol=1e-4):
    """Cluster rows of ``X`` into ``k`` groups.

    Stops after ``max_iter`` Lloyd steps or once the relative change in
    inertia drops below ``tol``. Empty clusters are re-seeded with the point
    farthest from its centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"k-means needs at least {k} vectors, got {n}")
    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(X, k, rng)
    labels, dist = assign(X, C)
    inertia = float(dist.sum())
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(dist))
            C[j] = X[far]
            dist[far] = 0.0
        labels, dist = assign(X, C)
        new_inertia = float(dist.sum())
        change = abs(inertia - new_inertia) / max(inertia, 1e-300)
        inertia = new_inertia
        if change < tol:
            break
    return KMeansResult(C, labels, inertia, n_iter)
