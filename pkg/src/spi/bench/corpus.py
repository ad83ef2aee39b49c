"""Synthetic corpora, query sets, and at-rest storage modes."""

from dataclasses import dataclass

import numpy as np

from .._validation import normalize_rows


@dataclass
class CorpusSpec:
    kind: str = "SyntheticGaussianMixture"
    n_docs: int = 10_000
    dim: int = 64
    n_clusters: int = 50
    cluster_std: float = 0.15
    spectrum_decay: float = 3.0
    seed: int = 0
    storage: str = "Float32"

    def __post_init__(self):
        if self.kind not in ("SyntheticGaussianMixture", "ExternalEmbeddingFile"):
            raise ValueError(f"unknown corpus kind {self.kind!r}")
        if self.storage not in ("Float32", "Int8Scaled"):
            raise ValueError(f"unknown storage mode {self.storage!r}")


@dataclass
class Corpus:
    vectors: np.ndarray
    ids: np.ndarray
    labels: np.ndarray | None = None
    centers: np.ndarray | None = None
    spec: CorpusSpec | None = None
    noise_basis: np.ndarray | None = None
    noise_scale: np.ndarray | None = None

    @property
    def n_docs(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass
class QuerySet:
    vectors: np.ndarray
    kinds: np.ndarray  # "easy" / "hard"
    ids: np.ndarray


def _noise_model(rng, dim, decay):
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    scale = (np.arange(1, dim + 1, dtype=np.float64)) ** (-float(decay))
    scale /= np.sqrt(np.mean(scale ** 2))
    return basis, scale


def make_corpus(spec=None, **overrides):
    """Gaussian-mixture corpus of unit vectors.

    Cluster centers are random unit directions. Within-cluster noise has
    per-component std ``cluster_std`` in a random orthonormal basis whose
    axis variances decay as ``k ** -spectrum_decay`` (rms-normalized), so a few
    directions dominate the local geometry; ``spectrum_decay=0`` gives
    isotropic clusters.
    """
    spec = spec or CorpusSpec(**overrides)
    rng = np.random.default_rng(spec.seed)
    centers = normalize_rows(rng.normal(size=(spec.n_clusters, spec.dim)))
    basis, scale = _noise_model(rng, spec.dim, spec.spectrum_decay)
    labels = rng.integers(0, spec.n_clusters, size=spec.n_docs)
    noise = (rng.normal(size=(spec.n_docs, spec.dim)) * scale) @ basis.T * spec.cluster_std
    vectors = normalize_rows(centers[labels] + noise).astype(np.float32)
    if spec.storage == "Int8Scaled":
        vectors = normalize_rows(dequantize_int8(*quantize_int8(vectors))).astype(np.float32)
    return Corpus(vectors, np.arange(spec.n_docs, dtype=np.int64), labels, centers, spec,
                  basis, scale)


def make_queries(corpus, n_queries=500, hard_fraction=0.5, easy_noise=0.3, seed=1):
    """Mixed query set: perturbed corpus vectors (easy) and cluster midpoints (hard).

    Easy-query perturbations follow the corpus noise model scaled by
    ``easy_noise`` relative to the cluster spread.
    """
    rng = np.random.default_rng(seed)
    n_hard = int(round(hard_fraction * n_queries))
    n_easy = n_queries - n_hard
    docs = rng.integers(0, corpus.n_docs, size=n_easy)
    std = corpus.spec.cluster_std if corpus.spec is not None else 0.1
    if corpus.noise_basis is not None:
        z = (rng.normal(size=(n_easy, corpus.dim)) * corpus.noise_scale) @ corpus.noise_basis.T
    else:
        z = rng.normal(size=(n_easy, corpus.dim))
    easy = normalize_rows(corpus.vectors[docs].astype(np.float64) + easy_noise * std * z)
    if corpus.centers is None or corpus.centers.shape[0] < 2:
        raise ValueError("hard queries need a corpus with at least two known cluster centers")
    k = corpus.centers.shape[0]
    a = rng.integers(0, k, size=n_hard)
    b = (a + rng.integers(1, k, size=n_hard)) % k
    hard = normalize_rows(corpus.centers[a] + corpus.centers[b])
    vectors = np.vstack([easy, hard]).astype(np.float32)
    kinds = np.array(["easy"] * n_easy + ["hard"] * n_hard)
    order = rng.permutation(n_queries)
    return QuerySet(vectors[order], kinds[order], np.arange(n_queries, dtype=np.int64))


def quantize_int8(X):
    """Symmetric per-row int8 quantization; returns ``(codes, scales)``."""
    X = np.asarray(X, dtype=np.float64)
    scale = np.abs(X).max(axis=1)
    scale[scale == 0] = 1.0
    codes = np.clip(np.rint(X / scale[:, None] * 127.0), -127, 127).astype(np.int8)
    return codes, scale.astype(np.float32)


def dequantize_int8(codes, scales):
    return codes.astype(np.float64) * (scales.astype(np.float64)[:, None] / 127.0)
