"""Reading and writing embedding files.

Two formats are supported: a binary matrix (``.spv``) and CSV with one
vector per line. The binary layout, little-endian::

    4s  magic "SPIV"
    u16 version (1)
    u64 rows
    u32 dim
    f32 rows * dim values, row-major
    u32 CRC32 of everything above
"""

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .._binary import Reader, Writer
from .corpus import Corpus, CorpusSpec, dequantize_int8, quantize_int8

MAGIC = b"SPIV"
FORMATS = ("binary", "csv")


class IngestError(ValueError):
    """An embedding file is malformed; ``row`` is the 0-based offending row, when known."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass
class IngestedCorpus:
    corpus: Corpus
    storage: str
    codes: np.ndarray | None = None  # int8 codes when stored Int8Scaled
    scales: np.ndarray | None = None

    @property
    def n_docs(self):
        return self.corpus.n_docs

    @property
    def dim(self):
        return self.corpus.dim

    def nbytes_at_rest(self):
        if self.codes is not None:
            return self.codes.nbytes + self.scales.nbytes
        return self.corpus.vectors.nbytes

    def summary(self):
        return {"n_docs": self.n_docs, "dim": self.dim, "storage": self.storage,
                "bytes_at_rest": self.nbytes_at_rest()}


def infer_format(path):
    return "csv" if Path(path).suffix.lower() in (".csv", ".txt") else "binary"


def encode_binary(X):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    w = Writer(MAGIC, 1)
    w.pack("QI", X.shape[0], X.shape[1])
    w.array(X, "f4")
    return w.getvalue()


def decode_binary(data):
    r = Reader(data, MAGIC)
    n, dim = r.unpack("QI")
    X = r.array("f4", (n, dim)).copy()
    r.done()
    return X


def _parse_csv(text):
    rows, dim = [], None
    for i, record in enumerate(csv.reader(io.StringIO(text))):
        if not record or all(not f.strip() for f in record):
            continue
        try:
            values = [float(f) for f in record]
        except ValueError as exc:
            raise IngestError(f"not a number ({exc})", i) from None
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise IngestError(f"has {len(values)} values, expected {dim}", i)
        rows.append(values)
    if not rows:
        raise IngestError("file holds no vectors")
    return np.array(rows, dtype=np.float32)


def write_vectors(path, X, fmt=None):
    """Write ``X`` in ``fmt`` (inferred from the suffix when None)."""
    fmt = fmt or infer_format(path)
    X = np.asarray(X, dtype=np.float32)
    if fmt == "binary":
        Path(path).write_bytes(encode_binary(X))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in X:
                w.writerow([repr(float(v)) for v in row])
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def validate_rows(X, dim=None):
    """Reject non-finite or zero rows and wrong widths, naming the first bad row."""
    if dim is not None and X.shape[1] != dim:
        raise IngestError(f"dimension {X.shape[1]} differs from expected {dim}")
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise IngestError("contains NaN or infinite values", int(bad[0]))
    norms = np.linalg.norm(X.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise IngestError("is an all-zero vector", int(zero[0]))
    return norms


def ingest(path, fmt=None, storage="Float32", dim=None):
    """Load, validate and unit-normalize an embedding file.

    With ``storage="Int8Scaled"`` vectors are kept as int8 codes plus one
    scale per row; the returned corpus holds their renormalized
    dequantization.
    """
    fmt = fmt or infer_format(path)
    if fmt == "binary":
        X = decode_binary(Path(path).read_bytes())
    elif fmt == "csv":
        X = _parse_csv(Path(path).read_text())
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    norms = validate_rows(X, dim)
    unit = X.copy()
    off = np.abs(norms - 1.0) > 1e-6  # rows already unit keep their exact bits
    unit[off] = (X[off].astype(np.float64) / norms[off, None]).astype(np.float32)
    spec = CorpusSpec(kind="ExternalEmbeddingFile", n_docs=X.shape[0], dim=X.shape[1],
                      storage=storage, n_clusters=0, cluster_std=math.nan)
    codes = scales = None
    if storage == "Int8Scaled":
        codes, scales = quantize_int8(unit)
        deq = dequantize_int8(codes, scales)
        unit = (deq / np.linalg.norm(deq, axis=1, keepdims=True)).astype(np.float32)
    corpus = Corpus(unit, np.arange(X.shape[0], dtype=np.int64), spec=spec)
    return IngestedCorpus(corpus, storage, codes, scales)
