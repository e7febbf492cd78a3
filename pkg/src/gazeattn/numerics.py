"""Scalar/vector primitives, seeded random streams and finite differences."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError

DTYPES = {"double": np.float64, "single": np.float32}


def resolve_dtype(precision: str | type | np.dtype) -> np.dtype:
    """Map ``"double"`` / ``"single"`` (or a numpy float dtype) to a dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def as_vector(x, dtype=np.float64) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {arr.shape}")
    return arr


def as_matrix(x, dtype=np.float64) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {arr.shape}")
    return arr


def dot(a, b) -> float:
    """Inner product accumulated in float64 regardless of storage precision."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"dot of shapes {a.shape} and {b.shape}")
    return float(kernels.dot(a, b))


def softmax_stable(scores) -> np.ndarray:
    """Max-shifted softmax; returns a float64 probability vector."""
    s = np.ascontiguousarray(scores)
    if s.ndim != 1 or s.shape[0] == 0:
        raise DimensionError(f"softmax needs a non-empty vector, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NumericError("softmax input contains non-finite scores")
    return kernels.softmax(s)


def seeded_stream(seed: int) -> np.random.Generator:
    """Deterministic random stream for ``seed``.

    Backed by numpy's PCG64 (O'Neill's permuted congruential generator),
    whose output is fixed across platforms for a given seed. Seeds are
    reduced to 64 bits. Use ``.random()`` for uniforms and
    ``.standard_normal()`` for normals.
    """
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def central_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Per-coordinate ``(f(x + h e_i) - f(x - h e_i)) / 2h``."""
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
