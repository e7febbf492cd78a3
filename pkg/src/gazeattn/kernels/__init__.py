"""Kernel dispatch.

The numba loop kernels are the default. Set ``GAZEATTN_DISABLE_JIT=1`` to
use the numpy implementations instead (also the automatic fallback when
numba cannot be imported). Both implementations stay importable as
``numba_impl`` / ``numpy_impl`` for cross-checking and benchmarking.
"""
import os

from . import _numpy as numpy_impl

try:
    from . import _numba as numba_impl
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

JIT_DISABLED = os.environ.get("GAZEATTN_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes", "on")
BACKEND = "numpy" if (JIT_DISABLED or numba_impl is None) else "numba"
_impl = numpy_impl if BACKEND == "numpy" else numba_impl

dot = _impl.dot
softmax = _impl.softmax
row_scores = _impl.row_scores
attend = _impl.attend
attend_backward = _impl.attend_backward
segment_means = _impl.segment_means
matmul = _impl.matmul
prefix_attend = _impl.prefix_attend
prefix_attend_backward = _impl.prefix_attend_backward
tile_csr = _impl.tile_csr

__all__ = [
    "BACKEND",
    "numba_impl",
    "numpy_impl",
    "dot",
    "softmax",
    "row_scores",
    "attend",
    "attend_backward",
    "segment_means",
    "matmul",
    "prefix_attend",
    "prefix_attend_backward",
    "tile_csr",
]
