"""Time the numba kernels against their numpy twins on typical shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-kernel mean wall time for both backends and the largest
absolute difference between their outputs.
"""
import argparse
import time

import numpy as np

from gazeattn.kernels import numba_impl, numpy_impl
from gazeattn.numerics import seeded_stream


def cases(rng):
    d, n = 128, 4608 + 32
    K = rng.standard_normal((n, d))
    V = rng.standard_normal((n, d))
    q = rng.standard_normal(d)
    idx = np.sort(rng.choice(n, 752 + 32, replace=False)).astype(np.int64)
    flat = rng.permutation(4608).astype(np.int64)
    offsets = np.arange(0, 4608 + 1, 36, dtype=np.int64)
    w = numpy_impl.attend(q, K, V, idx, d**-0.5)[1]
    g = rng.standard_normal(d)
    X = rng.standard_normal((576, 32))
    W = rng.standard_normal((32, 32))
    Q0 = rng.standard_normal((4, 32))
    S = rng.standard_normal((580, 32))
    SV = rng.standard_normal((580, 64))
    Wp = numpy_impl.prefix_attend(Q0, S, SV, 576, 32**-0.5)[1]
    G = rng.standard_normal((4, 64))
    return {
        "row_scores (784 of 4640 rows, d=128)": ("row_scores", (q, K, idx, d**-0.5)),
        "attend (784 rows, d=128)": ("attend", (q, K, V, idx, d**-0.5)),
        "attend_backward (784 rows, d=128)": ("attend_backward", (q, K, V, idx, d**-0.5, w, g)),
        "segment_means (128 regions of 36)": ("segment_means", (K, flat, offsets)),
        "matmul (576x32 @ 32x32)": ("matmul", (X, W)),
        "prefix_attend (4 over 580)": ("prefix_attend", (Q0, S, SV, 576, 32**-0.5)),
        "prefix_attend_backward (4 over 580)": ("prefix_attend_backward", (Q0, S, SV, 576, 32**-0.5, Wp, G)),
        "tile_csr (8x24x24, 1x6x6)": ("tile_csr", (8, 24, 24, 0, 576, 1, 6, 6)),
    }


def timed(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeat):
        out = fn(*args)
    return (time.perf_counter() - t0) / repeat, out


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))))
               for x, y in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = seeded_stream(0)
    print(f"{'kernel':40s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, (name, fargs) in cases(rng).items():
        t_nb, o_nb = timed(getattr(numba_impl, name), fargs, args.repeat)
        t_np, o_np = timed(getattr(numpy_impl, name), fargs, args.repeat)
        print(f"{label:40s} {t_nb * 1e6:10.1f} {t_np * 1e6:10.1f} {t_np / t_nb:8.2f} {max_diff(o_nb, o_np):11.2e}")


if __name__ == "__main__":
    main()
