"""Dimension-checked vector arithmetic for embedding features.

Embeddings are plain 1-D ``float64`` numpy arrays. A class feature matrix is a
2-D array of shape ``(n, m)``: one unit-norm column per class, in label order,
so that ``query @ matrix`` yields the per-class similarity scores.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimMismatchError,
    EmptyScoresError,
    InvalidVectorError,
    ZeroVectorError,
)

ZERO_NORM = 1e-12
UNIT_TOL = 1e-6


def as_vector(values: Iterable[float] | np.ndarray, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float64 array, optionally of length ``dim``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidVectorError(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidVectorError("vector contains NaN or Inf")
    if dim is not None and arr.size != dim:
        raise DimMismatchError(f"expected dim {dim}, got {arr.size}")
    return arr


def is_unit(v: np.ndarray, tol: float = UNIT_TOL) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


def normalize(v: Iterable[float] | np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises:
        ZeroVectorError: if the norm is below ``1e-12``.
    """
    arr = as_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm:.3e}")
    return arr / norm


def fuse_average(features: Sequence[np.ndarray]) -> np.ndarray:
    """Fuse unit-norm features by summing them and renormalizing.

    Sum-then-normalize is equivalent to mean-then-normalize.
    """
    if len(features) == 0:
        raise InvalidVectorError("fuse_average needs at least one feature")
    vecs = [as_vector(f) for f in features]
    dim = vecs[0].size
    for f in vecs[1:]:
        if f.size != dim:
            raise DimMismatchError(f"cannot fuse dims {dim} and {f.size}")
    total = np.zeros(dim, dtype=np.float64)
    for f in vecs:
        total += f
    return normalize(total)


def stack_columns(columns: Sequence[np.ndarray]) -> np.ndarray:
    """Stack per-class unit vectors into an ``(n, m)`` class feature matrix."""
    if len(columns) == 0:
        raise InvalidVectorError("a class feature matrix needs at least one column")
    cols = [as_vector(c) for c in columns]
    dim = cols[0].size
    for i, c in enumerate(cols):
        if c.size != dim:
            raise DimMismatchError(f"column {i} has dim {c.size}, expected {dim}")
        if not is_unit(c):
            raise InvalidVectorError(f"column {i} is not unit-norm")
    return np.stack(cols, axis=1)


def score(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Similarity of ``query`` to every column of ``matrix`` (length ``m``)."""
    q = as_vector(query)
    if matrix.ndim != 2:
        raise DimMismatchError(f"matrix must be 2-D, got shape {matrix.shape}")
    if matrix.shape[0] != q.size:
        raise DimMismatchError(f"query dim {q.size} != matrix dim {matrix.shape[0]}")
    return q @ matrix


def argmax_index(scores: Sequence[float] | np.ndarray) -> int:
    """Index of the maximum score; ties go to the lowest index."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise EmptyScoresError("argmax over empty scores")
    # np.argmax returns the first occurrence of the maximum.
    return int(np.argmax(arr))
