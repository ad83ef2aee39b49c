"""Energy-entropy of a coarse query vector."""

import numpy as np


def energy_distribution(q1):
    q = np.asarray(q1, dtype=np.float64)
    energy = q * q
    total = energy.sum(axis=-1, keepdims=True)
    if np.any(total == 0):
        raise ValueError("entropy is undefined for a zero vector")
    return energy / total


def query_entropy(q1):
    """Shannon entropy (nats) of ``q_k**2 / ||q||**2``; rows are treated independently."""
    p = energy_distribution(q1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h
