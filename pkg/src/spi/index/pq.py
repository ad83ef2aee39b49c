"""Product quantization: per-subspace codebooks, encoding and asymmetric scoring."""

import numpy as np

from .._validation import check_matrix, check_vector
from ..exceptions import NotFittedError
from .kmeans import assign, kmeans


def pack_codes(codes, bits):
    """Bit-pack a ``(n, M)`` code matrix at ``bits`` bits per code."""
    codes = np.asarray(codes, dtype=np.uint16)
    if bits == 8:
        return codes.astype(np.uint8).tobytes()
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint16)
    bitplanes = ((codes.reshape(-1, 1) >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitplanes.ravel()).tobytes()


def unpack_codes(data, n, m, bits):
    if bits == 8:
        return np.frombuffer(data, dtype=np.uint8, count=n * m).reshape(n, m).copy()
    total = n * m * bits
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:total].reshape(-1, bits)
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.uint16)
    return (flat.astype(np.uint16) @ weights).reshape(n, m).astype(np.uint8)


def packed_size(n, m, bits):
    return n * m if bits == 8 else (n * m * bits + 7) // 8


class PQCodebook:
    """``n_subspaces`` codebooks of up to ``2 ** bits`` centroids each.

    When fewer training vectors than ``2 ** bits`` are available the codebooks
    shrink to the number of vectors; codes stay ``bits`` wide.
    """

    def __init__(self, dim, n_subspaces=8, bits=8):
        if not 1 <= bits <= 8:
            raise ValueError("pq_bits must be in 1..8")
        if n_subspaces < 1 or dim % n_subspaces:
            raise ValueError(f"pq_subspaces={n_subspaces} must divide dimension {dim}")
        self.dim = dim
        self.n_subspaces = n_subspaces
        self.bits = bits
        self.centroids = None  # (M, ksub, dsub)

    @property
    def sub_dim(self):
        return self.dim // self.n_subspaces

    @property
    def trained(self):
        return self.centroids is not None

    def fit(self, X, seed=0):
        X = check_matrix(X, dim=self.dim, name="training vectors")
        ksub = min(1 << self.bits, X.shape[0])
        books = []
        for m in range(self.n_subspaces):
            sub = X[:, m * self.sub_dim:(m + 1) * self.sub_dim]
            books.append(kmeans(sub, ksub, seed=seed + m).centroids)
        self.centroids = np.stack(books).astype(np.float32).astype(np.float64)
        return self

    @classmethod
    def from_centroids(cls, centroids, bits=8):
        centroids = np.asarray(centroids, dtype=np.float64)
        m, ksub, dsub = centroids.shape
        book = cls(m * dsub, m, bits)
        if ksub > 1 << bits:
            raise ValueError(f"{ksub} centroids do not fit in {bits}-bit codes")
        book.centroids = centroids
        return book

    def _require(self):
        if not self.trained:
            raise NotFittedError("PQ codebook is not trained")

    def encode(self, X):
        """Nearest centroid per subspace (ties to the lowest index)."""
        self._require()
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            check_matrix(X, dim=self.dim, name="vectors")
        codes = np.empty((X.shape[0], self.n_subspaces), dtype=np.uint8)
        for m in range(self.n_subspaces):
            sub = X[:, m * self.sub_dim:(m + 1) * self.sub_dim]
            codes[:, m] = assign(sub, self.centroids[m])[0]
        return codes

    def decode(self, codes):
        self._require()
        codes = np.atleast_2d(np.asarray(codes, dtype=np.intp))
        parts = [self.centroids[m][codes[:, m]] for m in range(self.n_subspaces)]
        return np.hstack(parts)

    def lookup_tables(self, query):
        """Per-subspace inner products of ``query`` with every centroid, shape (M, ksub)."""
        self._require()
        q = check_vector(query, dim=self.dim, name="query")
        qs = q.reshape(self.n_subspaces, self.sub_dim)
        return np.einsum("md,mkd->mk", qs, self.centroids)

    def _norm_tables(self):
        return np.einsum("mkd,mkd->mk", self.centroids, self.centroids)

    def asym_scores(self, query, codes, offset=None):
        """Cosine between full-precision ``query`` and each decoded code row.

        ``offset`` (a coarse centroid for residual codes) is added to every
        decoded row before the cosine is taken.
        """
        codes = np.atleast_2d(np.asarray(codes, dtype=np.intp))
        q = check_vector(query, dim=self.dim, name="query")
        lut = self.lookup_tables(q)
        norms = self._norm_tables()
        cols = np.arange(self.n_subspaces)
        dots = lut[cols, codes].sum(axis=1)
        sq = norms[cols, codes].sum(axis=1)
        if offset is not None:
            offset = np.asarray(offset, dtype=np.float64)
            cross = self.lookup_tables(offset)
            dots = dots + float(q @ offset)
            sq = sq + float(offset @ offset) + 2.0 * cross[cols, codes].sum(axis=1)
        sq = np.maximum(sq, 0.0)
        denom = np.linalg.norm(q) * np.sqrt(sq)
        safe = np.where(denom > 0, denom, 1.0)
        return np.where(denom > 0, dots / safe, 0.0)

    def reconstruction_error(self, X):
        X = np.asarray(X, dtype=np.float64)
        return float(np.mean(np.sum((X - self.decode(self.encode(X))) ** 2, axis=1)))
