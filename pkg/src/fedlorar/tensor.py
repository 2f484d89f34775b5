"""Flat float64 parameter vectors and the arithmetic the round protocol needs.

A ``ParamVector`` is a read-only one-dimensional ``numpy.ndarray`` of dtype
float64. Every public operation validates dimensions and refuses to hand back
non-finite values.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, NonFiniteResult

ParamVector = np.ndarray


def as_vector(values: Iterable[float] | np.ndarray) -> ParamVector:
    """Copy ``values`` into a read-only float64 vector, checking finiteness."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionMismatch("a parameter vector needs dim >= 1")
    return _seal(arr)


def zeros(dim: int) -> ParamVector:
    if dim < 1:
        raise DimensionMismatch(f"dim must be positive, got {dim}")
    return _seal(np.zeros(dim, dtype=np.float64))


def _seal(arr: np.ndarray) -> ParamVector:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteResult("vector contains NaN or Inf entries")
    arr.flags.writeable = False
    return arr


def _check_same_dim(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionMismatch(f"dim {x.shape[0] if x.ndim else 0} != {y.shape[0] if y.ndim else 0}")


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``alpha * x + y``."""
    _check_same_dim(x, y)
    with np.errstate(over="ignore", invalid="ignore"):
        out = alpha * x + y
    return _seal(out)


def weighted_sum(weights: Sequence[float], vectors: Sequence[ParamVector]) -> ParamVector:
    """Return ``sum_i weights[i] * vectors[i]`` accumulated in ascending index order.

    Accumulation uses Neumaier compensation so the result is close to the
    correctly rounded sum and is bit-reproducible for a given input order.
    """
    if len(weights) == 0 or len(vectors) == 0:
        raise EmptyInput("weighted_sum needs at least one (weight, vector) pair")
    if len(weights) != len(vectors):
        raise DimensionMismatch(f"{len(weights)} weights for {len(vectors)} vectors")
    first = vectors[0]
    for v in vectors[1:]:
        _check_same_dim(first, v)

    with np.errstate(over="ignore", invalid="ignore"):
        total = np.zeros_like(first, dtype=np.float64)
        comp = np.zeros_like(total)
        for w, v in zip(weights, vectors):
            term = float(w) * np.asarray(v, dtype=np.float64)
            t = total + term
            big = np.abs(total) >= np.abs(term)
            comp += np.where(big, (total - t) + term, (term - t) + total)
            total = t
        out = total + comp
    return _seal(out)


def l2_norm_sq(x: ParamVector) -> float:
    """Return the squared Euclidean norm of ``x``."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteResult("l2_norm_sq of a non-finite vector")
    with np.errstate(over="ignore"):
        out = float(np.dot(arr, arr))
    if not np.isfinite(out):
        raise NonFiniteResult("squared norm overflowed")
    return out
