"""View-specific distance metrics: Hamming for payload, Euclidean for spectra."""

import numpy as np

from data_models import View
from errors import InternalConsistencyError


def _check_lengths(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise InternalConsistencyError(f"vector length mismatch: {a.shape} vs {b.shape}")


def payload_distance(a, b) -> float:
    """Fraction of positions at which two payload vectors differ."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_lengths(a, b)
    if a.size == 0:
        return 0.0
    return float(np.count_nonzero(a != b) / a.size)


def spectral_distance(a, b) -> float:
    """L2 norm of the difference of two spectral vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_lengths(a, b)
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff)))


def view_distance(view: View, a, b) -> float:
    if view is View.PAYLOAD:
        return payload_distance(a, b)
    return spectral_distance(a, b)


def pairwise_block(view: View, rows: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Distances from every vector in ``rows`` to every vector in ``matrix``."""
    if view is View.PAYLOAD:
        return (rows[:, None, :] != matrix[None, :, :]).mean(axis=2)
    diff = rows[:, None, :].astype(np.float64) - matrix[None, :, :].astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=2))
