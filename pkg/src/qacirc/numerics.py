"""Softmax / entropy primitives in float64."""

from __future__ import annotations

import numpy as np

from .errors import InvalidDistribution, InvalidShape, NonFiniteInput

DIST_TOL = 1e-6


def _as_vector(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidShape(f"expected a non-empty vector, got shape {arr.shape}")
    return arr


def softmax(scores) -> np.ndarray:
    """Max-shifted softmax of a finite score vector."""
    x = _as_vector(scores)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("softmax input contains NaN or Inf")
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(scores) -> np.ndarray:
    x = _as_vector(scores)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("log_softmax input contains NaN or Inf")
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis where ``mask`` is True; masked entries get exactly 0.

    Every row must keep at least one unmasked entry.
    """
    s = np.where(mask, scores, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(s - m), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def check_distribution(p, tol: float = DIST_TOL) -> np.ndarray:
    arr = _as_vector(p)
    if not np.all(np.isfinite(arr)):
        raise InvalidDistribution("distribution has non-finite entries")
    if np.any(arr < 0) or np.any(arr > 1):
        raise InvalidDistribution("distribution entries must lie in [0, 1]")
    if abs(arr.sum() - 1.0) > tol:
        raise InvalidDistribution(f"distribution sums to {arr.sum()!r}")
    return arr


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    arr = check_distribution(p)
    nz = arr[arr > 0]
    return float(-(nz * np.log(nz)).sum())


def renormalize(row, start: int, end: int) -> np.ndarray:
    """Restrict ``row`` to ``[start, end)`` and rescale it to sum to one."""
    arr = np.asarray(row, dtype=np.float64)
    if not 0 <= start < end <= arr.shape[-1]:
        raise InvalidShape(f"window [{start}, {end}) outside row of length {arr.shape[-1]}")
    window = arr[start:end]
    total = window.sum()
    if total <= 0:
        return np.full(end - start, 1.0 / (end - start))
    return window / total
