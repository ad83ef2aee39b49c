"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionMismatchError


def check_matrix(X, dim=None, name="X", dtype=np.float64, min_rows=1):
    """Validate a 2-D finite float matrix, optionally with a fixed width."""
    X = check_array(X, dtype=dtype, ensure_2d=True, ensure_all_finite=True,
                    ensure_min_samples=min_rows, input_name=name)
    if dim is not None and X.shape[1] != dim:
        raise DimensionMismatchError(name, dim, X.shape[1])
    return X


def check_vector(x, dim=None, name="x", dtype=np.float64):
    """Validate a 1-D finite float vector."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        raise ValueError(f"{name}: expected a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: contains NaN or Inf")
    if dim is not None and x.shape[0] != dim:
        raise DimensionMismatchError(name, dim, x.shape[0])
    return x


def check_unit_rows(X, name="X", atol=1e-4):
    norms = np.linalg.norm(X, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > atol)
    if bad.size:
        raise ValueError(
            f"{name}: rows must be unit-normalized; row {int(bad[0])} has norm {norms[bad[0]]:.6g}")


def normalize_rows(X, name="X"):
    """Return ``X`` with unit-norm rows; zero rows are rejected."""
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        row = int(np.flatnonzero(norms.ravel() == 0)[0])
        raise ValueError(f"{name}: row {row} has zero norm and cannot be normalized")
    return X / norms


def check_ids(ids, n):
    if ids is None:
        return np.arange(n, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (n,):
        raise ValueError(f"ids: expected {n} ids, got shape {ids.shape}")
    if np.unique(ids).size != n:
        raise ValueError("ids: doc ids must be unique")
    return ids
