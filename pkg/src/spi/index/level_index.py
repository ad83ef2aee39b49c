"""Per-level vector index with exact, IVF and IVF+PQ backends."""

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .._binary import Reader, Writer
from .._topk import topk_order
from .._validation import check_ids, check_matrix, check_unit_rows, check_vector
from .kmeans import assign, kmeans
from .pq import PQCodebook, pack_codes, packed_size, unpack_codes

BACKENDS = ("Flat", "IVF", "IVF_PQ")
_BACKEND_CODE = {name: i for i, name in enumerate(BACKENDS)}
MAGIC = b"SPIX"
VERSION = 1


@dataclass(frozen=True)
class IndexSpec:
    backend: str = "Flat"
    n_lists: int = 64
    n_probe: int = 8
    pq_subspaces: int = 16
    pq_bits: int = 8

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.n_lists < 1 or self.n_probe < 1:
            raise ValueError("n_lists and n_probe must be positive")
        if self.n_probe > self.n_lists:
            raise ValueError(f"n_probe={self.n_probe} exceeds n_lists={self.n_lists}")
        if not 1 <= self.pq_bits <= 8:
            raise ValueError("pq_bits must be in 1..8")
        if self.pq_subspaces < 1:
            raise ValueError("pq_subspaces must be positive")

    def check_dim(self, dim):
        if self.backend == "IVF_PQ" and dim % self.pq_subspaces:
            raise ValueError(f"pq_subspaces={self.pq_subspaces} must divide dimension {dim}")


class SearchHit(NamedTuple):
    doc_id: int
    score: float
    level: int


@dataclass
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray
    level: int = 1
    n_scored: int = 0  # document vectors (or codes) scored
    n_centroids: int = 0  # coarse centroids compared while probing
    n_skipped: int = 0  # restrict ids not present in this index

    @property
    def hits(self):
        return [SearchHit(int(i), float(s), self.level) for i, s in zip(self.ids, self.scores)]

    @property
    def cost(self):
        return self.n_scored + self.n_centroids

    def __len__(self):
        return len(self.ids)


@dataclass
class _Store:
    """Row storage. Replaced wholesale when it must grow."""
    ids: np.ndarray
    cells: np.ndarray
    vectors: np.ndarray | None
    codes: np.ndarray | None
    size: int = 0


class LevelIndex:
    """ANN index over unit vectors of one pyramid level.

    Searches may run concurrently with one writer: inserts write the row
    before publishing it in a posting list, and searches read the posting
    list before the row storage, so a reader never sees a row that is not
    yet stored.
    """

    def __init__(self, spec=None, level=1, seed=0):
        self.spec = spec or IndexSpec()
        self.level = int(level)
        self.seed = int(seed)
        self.dim = None
        self.centroids = None
        self.codebook = None
        self._postings = []
        self._row_of = {}
        self._lookup = None
        self._store = None

    # -- construction ---------------------------------------------------------
    @classmethod
    def build(cls, vectors, ids=None, spec=None, level=1, seed=0):
        return cls(spec, level, seed).fit(vectors, ids)

    def fit(self, vectors, ids=None):
        X = check_matrix(vectors, name="index vectors", dtype=np.float32, min_rows=0)
        check_unit_rows(X, name="index vectors")
        ids = check_ids(ids, X.shape[0])
        self.dim = X.shape[1]
        self.spec.check_dim(self.dim)
        backend = self.spec.backend
        if backend != "Flat" and X.shape[0] < self.spec.n_lists:
            raise ValueError(f"{backend} with n_lists={self.spec.n_lists} needs at least "
                             f"{self.spec.n_lists} vectors, got {X.shape[0]}")
        X64 = X.astype(np.float64)
        if backend == "Flat":
            labels = np.zeros(X.shape[0], dtype=np.intp)
            n_lists = 1
        else:
            km = kmeans(X64, self.spec.n_lists, seed=self.seed)
            # keep centroids at storage precision so a reloaded index probes identically
            self.centroids = km.centroids.astype(np.float32).astype(np.float64)
            labels = assign(X64, self.centroids)[0]
            n_lists = self.spec.n_lists
        if backend == "IVF_PQ":
            # residual coding against the coarse centroid
            self.codebook = PQCodebook(self.dim, self.spec.pq_subspaces, self.spec.pq_bits)
            self.codebook.fit(X64 - self.centroids[labels], seed=self.seed)
        self._store = self._new_store(max(16, X.shape[0]))
        self._write_rows(X, ids, labels)
        self._row_of = {int(d): r for r, d in enumerate(ids)}
        self._lookup = None
        rows = np.arange(X.shape[0], dtype=np.int64)
        self._postings = [rows[labels == j] for j in range(n_lists)]
        return self

    def _new_store(self, capacity):
        pq = self.spec.backend == "IVF_PQ"
        return _Store(
            ids=np.empty(capacity, dtype=np.int64),
            cells=np.empty(capacity, dtype=np.int32),
            vectors=None if pq else np.empty((capacity, self.dim), dtype=np.float32),
            codes=np.empty((capacity, self.spec.pq_subspaces), dtype=np.uint8) if pq else None,
        )

    def _write_rows(self, X, ids, cells):
        st = self._store
        start, n = st.size, X.shape[0]
        if start + n > st.ids.shape[0]:
            grown = self._new_store(max(2 * st.ids.shape[0], start + n))
            grown.ids[:start] = st.ids[:start]
            grown.cells[:start] = st.cells[:start]
            if st.vectors is not None:
                grown.vectors[:start] = st.vectors[:start]
            if st.codes is not None:
                grown.codes[:start] = st.codes[:start]
            grown.size = start
            st = grown
        st.ids[start:start + n] = ids
        st.cells[start:start + n] = cells
        if st.vectors is not None:
            st.vectors[start:start + n] = X
        else:
            residual = X.astype(np.float64) - self.centroids[np.asarray(cells)]
            st.codes[start:start + n] = self.codebook.encode(residual)
        st.size = start + n
        self._store = st
        return np.arange(start, start + n, dtype=np.int64)

    # -- introspection --------------------------------------------------------
    def __len__(self):
        return len(self._row_of)

    def __contains__(self, doc_id):
        return int(doc_id) in self._row_of

    @property
    def n_lists(self):
        return len(self._postings)

    def doc_ids(self):
        """Indexed doc ids in posting-list order."""
        st = self._store
        if st is None:
            return np.empty(0, dtype=np.int64)
        rows = np.concatenate(self._postings) if self._postings else np.empty(0, np.int64)
        return st.ids[rows]

    def list_sizes(self):
        return np.array([len(p) for p in self._postings], dtype=np.int64)

    def vectors_for(self, doc_ids):
        """Stored (or PQ-reconstructed) vectors of ``doc_ids``, float64."""
        rows = np.array([self._row_of[int(d)] for d in doc_ids], dtype=np.int64)
        st = self._store
        if st.vectors is not None:
            return st.vectors[rows].astype(np.float64)
        return self.codebook.decode(st.codes[rows]) + self.centroids[st.cells[rows]]

    def assigned_list(self, doc_id):
        return int(self._store.cells[self._row_of[int(doc_id)]])

    def rows_of(self, doc_ids):
        """Storage row of each id, -1 where the id is not indexed."""
        doc_ids = np.asarray(doc_ids, dtype=np.int64).ravel()
        table = self._lookup
        if table is None:
            ids = np.fromiter(self._row_of.keys(), dtype=np.int64, count=len(self._row_of))
            rows = np.fromiter(self._row_of.values(), dtype=np.int64, count=len(self._row_of))
            order = np.argsort(ids)
            table = self._lookup = (ids[order], rows[order])
        keys, rows = table
        if not keys.size:
            return np.full(doc_ids.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(keys, doc_ids), keys.size - 1)
        return np.where(keys[pos] == doc_ids, rows[pos], -1)

    # -- search ---------------------------------------------------------------
    def _score_rows(self, st, rows, q):
        if st.vectors is not None:
            # row-wise reduction: a doc's score never depends on which other rows are scored
            return np.sum(st.vectors[rows].astype(np.float64) * q, axis=1)
        cells = st.cells[rows]
        out = np.empty(rows.shape[0])
        for cell in np.unique(cells):
            sel = cells == cell
            out[sel] = self.codebook.asym_scores(q, st.codes[rows[sel]], self.centroids[cell])
        return out

    def _empty(self, skipped=0):
        return SearchResult(np.empty(0, dtype=np.int64), np.empty(0), self.level, 0, 0, skipped)

    def search(self, query, k, restrict=None):
        """Top-``k`` hits for ``query``.

        With ``restrict``, exactly the listed ids present in the index are
        scored (no probing); absent ids are counted in ``n_skipped``.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        if self._store is None:
            return self._empty() if restrict is None else self._empty(len(list(restrict)))
        q = check_vector(query, dim=self.dim, name="query")
        if restrict is not None:
            found = self.rows_of(restrict)
            skipped = int(np.count_nonzero(found < 0))
            rows = np.unique(found[found >= 0])
            if not rows.size:
                return self._empty(skipped)
            st = self._store
            n_centroids = 0
        else:
            postings = self._postings
            if self.centroids is not None:
                # probe the nearest cells by Euclidean distance to the query
                d = np.einsum("ij,ij->i", self.centroids, self.centroids) - 2.0 * (self.centroids @ q)
                probe = topk_order(-d, np.arange(len(d)), self.spec.n_probe)
                n_centroids = len(d)
                parts = [postings[j] for j in probe]
            else:
                parts = postings
                n_centroids = 0
            skipped = 0
            st = self._store
            rows = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
            if rows.size == 0:
                return SearchResult(np.empty(0, np.int64), np.empty(0), self.level, 0, n_centroids)
        scores = self._score_rows(st, rows, q)
        ids = st.ids[rows]
        pos = topk_order(scores, ids, k)
        return SearchResult(ids[pos], scores[pos], self.level, int(rows.size), n_centroids, skipped)

    # -- updates --------------------------------------------------------------
    def insert(self, doc_id, vector):
        """Add one vector to the nearest existing cell (no re-clustering)."""
        if self._store is None:
            raise ValueError("index must be built before inserting")
        doc_id = int(doc_id)
        if doc_id in self._row_of:
            raise ValueError(f"doc_id {doc_id} is already indexed")
        v = check_vector(vector, dim=self.dim, name="vector", dtype=np.float32)
        check_unit_rows(v[None, :], name="vector")
        cell = 0 if self.centroids is None else int(assign(v[None, :].astype(np.float64), self.centroids)[0][0])
        row = self._write_rows(v[None, :], np.array([doc_id]), np.array([cell]))[0]
        self._postings[cell] = np.append(self._postings[cell], row)
        self._row_of[doc_id] = int(row)
        self._lookup = None
        return self

    def remove(self, doc_id):
        doc_id = int(doc_id)
        row = self._row_of.get(doc_id)
        if row is None:
            raise KeyError(f"doc_id {doc_id} is not indexed")
        cell = int(self._store.cells[row])
        p = self._postings[cell]
        self._postings[cell] = p[p != row]
        del self._row_of[doc_id]
        self._lookup = None
        return self

    # -- serialization --------------------------------------------------------
    def to_bytes(self):
        if self._store is None:
            raise ValueError("cannot serialize an unbuilt index")
        s = self.spec
        w = Writer(MAGIC, VERSION)
        w.pack("HBIIHBIQ", self.level, _BACKEND_CODE[s.backend], s.n_lists, s.n_probe,
               s.pq_subspaces, s.pq_bits, self.dim, self.seed)
        w.pack("I", len(self._postings))
        if self.centroids is not None:
            w.array(self.centroids, "f4")
        if self.codebook is not None:
            w.pack("H", self.codebook.centroids.shape[1])
            w.array(self.codebook.centroids, "f4")
        st = self._store
        for rows in self._postings:
            w.pack("I", len(rows))
            w.array(st.ids[rows], "i8")
            if st.vectors is not None:
                w.array(st.vectors[rows], "f4")
            else:
                w.raw(pack_codes(st.codes[rows], s.pq_bits))
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data):
        r = Reader(data, MAGIC, (VERSION,))
        level, backend, n_lists, n_probe, m, bits, dim, seed = r.unpack("HBIIHBIQ")
        spec = IndexSpec(BACKENDS[backend], n_lists, n_probe, m, bits)
        idx = cls(spec, level, seed)
        idx.dim = dim
        (stored_lists,) = r.unpack("I")
        if spec.backend != "Flat":
            idx.centroids = r.array("f4", (stored_lists, dim)).astype(np.float64)
        if spec.backend == "IVF_PQ":
            (ksub,) = r.unpack("H")
            cents = r.array("f4", (m, ksub, dim // m)).astype(np.float64)
            idx.codebook = PQCodebook.from_centroids(cents, bits)
        ids_parts, vec_parts, code_parts, sizes = [], [], [], []
        for _ in range(stored_lists):
            (count,) = r.unpack("I")
            sizes.append(count)
            ids_parts.append(r.array("i8", (count,)))
            if spec.backend == "IVF_PQ":
                code_parts.append(unpack_codes(r.raw(packed_size(count, m, bits)), count, m, bits))
            else:
                vec_parts.append(r.array("f4", (count, dim)))
        r.done()
        n = int(sum(sizes))
        idx._store = idx._new_store(max(16, n))
        st = idx._store
        if n:
            st.ids[:n] = np.concatenate(ids_parts)
            if st.vectors is not None:
                st.vectors[:n] = np.concatenate(vec_parts)
            else:
                st.codes[:n] = np.concatenate(code_parts)
        st.size = n
        bounds = np.cumsum([0] + sizes)
        st.cells[:n] = np.repeat(np.arange(stored_lists, dtype=np.int32), sizes)
        idx._postings = [np.arange(bounds[j], bounds[j + 1], dtype=np.int64) for j in range(stored_lists)]
        idx._row_of = {int(d): i for i, d in enumerate(st.ids[:n])}
        idx._lookup = None
        return idx

    def save(self, path):
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

    def nbytes(self):
        """Resident payload bytes (vectors or codes, ids, centroids, codebooks)."""
        n = len(self)
        total = n * 8
        if self.spec.backend == "IVF_PQ":
            total += packed_size(n, self.spec.pq_subspaces, self.spec.pq_bits)
            total += self.codebook.centroids.size * 4
        else:
            total += n * self.dim * 4
        if self.centroids is not None:
            total += self.centroids.size * 4
        return total
