"""Self-check suites run by ``gazeattn verify``."""
from __future__ import annotations

import time
from itertools import product
from math import ceil

import numpy as np

from .attention import dense_attention, gaze_attention, gaze_attention_backward
from .cost_model import ModelGeometry, attended_visual_count, savings_report
from .kv_store import TEXT, VISUAL, LayerHeadCache, refresh_descriptors
from .layout import TokenVolume, tile_regions
from .numerics import central_difference, seeded_stream
from .routing import top_k


def random_cache(rng, d, n_text_before, volume_hw, n_text_after, block=(1, 6, 6)):
    """Text prefix, one frame of visual tokens, text suffix; all rows seeded normals."""
    H, W = volume_hw
    n_vis = H * W
    N = n_text_before + n_vis + n_text_after
    seg = np.r_[np.full(n_text_before, TEXT), np.full(n_vis, VISUAL), np.full(n_text_after, TEXT)]
    unit = np.where(seg == VISUAL, 0, -1)
    cache = LayerHeadCache.from_arrays(rng.standard_normal((N, d)), rng.standard_normal((N, d)), seg, unit)
    volume = TokenVolume(1, H, W, sequence_offset=n_text_before)
    table = refresh_descriptors(cache, tile_regions(volume, *block))
    return cache, table


def suite_full_selection(n=40) -> bool:
    rng = seeded_stream(101)
    for i in range(n):
        d = (8, 64)[i % 2]
        hw = ((6, 6), (24, 24))[(i // 2) % 2]
        cache, table = random_cache(rng, d, int(rng.integers(0, 5)), hw, int(rng.integers(1, 6)))
        q = rng.standard_normal(d)
        g = gaze_attention(q, cache, table, k=table.n_regions).output
        ref = dense_attention(q, cache).output
        if np.max(np.abs(g - ref)) > 1e-10:
            return False
    return True


def _sort_oracle(scores, k):
    keyed = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return keyed[:k]


def suite_topk(n=200) -> bool:
    rng = seeded_stream(202)
    for i in range(n):
        G = int(rng.integers(1, 300))
        s = rng.standard_normal(G)
        if i % 2:
            s = np.round(s, 1)  # many duplicates
        k = int(rng.integers(1, G + 1))
        if sorted(top_k(s, k).region_ids.tolist()) != sorted(_sort_oracle(s.tolist(), k)):
            return False
    # explicit tie at the boundary
    return top_k(np.array([5.0, 5.0, 1.0]), 1).region_ids.tolist() == [0]


def suite_gradient(n=10) -> bool:
    rng = seeded_stream(303)
    for _ in range(n):
        cache, table = random_cache(rng, 8, 2, (2, 4), 1, block=(1, 2, 2))
        q = rng.standard_normal(8)
        g = rng.standard_normal(8)
        out = gaze_attention(q, cache, table, k=1)
        grads = gaze_attention_backward(q, cache, table, out.selection, g, forward=out)

        def f_q(x):
            return gaze_attention(x, cache, table, selection=out.selection).output @ g

        fd = central_difference(f_q, q)
        if np.any(np.abs(fd - grads.query) > np.maximum(1e-7, 1e-5 * np.abs(grads.query))):
            return False
        outside = np.setdiff1d(np.arange(cache.n), out.indices)
        if np.any(grads.keys[outside] != 0) or np.any(grads.values[outside] != 0):
            return False
    return True


def suite_partition() -> bool:
    for T, H, W in product(range(1, 3), range(1, 7), range(1, 7)):
        vol = TokenVolume(T, H, W, sequence_offset=3)
        for rt, rh, rw in product(range(1, T + 1), range(1, H + 1), range(1, W + 1)):
            regs = tile_regions(vol, rt, rh, rw)
            if len(regs) != ceil(T / rt) * ceil(H / rh) * ceil(W / rw):
                return False
            allidx = np.sort(np.concatenate([r.token_indices for r in regs]))
            if not np.array_equal(allidx, np.arange(3, 3 + T * H * W)):
                return False
    return True


def suite_cost_example() -> bool:
    gaze = ModelGeometry(layers=1, heads=1, d=128, units=8, tokens_per_unit=576, region_size=36,
                         region_count=128, top_k=20, context_tokens=4)
    dense = ModelGeometry(layers=1, heads=1, d=128, units=8, tokens_per_unit=576, region_size=36,
                          region_count=128, top_k=128, dense=True)
    rep = savings_report(dense, gaze)
    return attended_visual_count(gaze) == 752 and "752/4608 = 16.3%" in rep.to_text()


SUITES = {
    "full-selection-equivalence": suite_full_selection,
    "topk-oracle": suite_topk,
    "gradient": suite_gradient,
    "partition": suite_partition,
    "cost-example": suite_cost_example,
}


def run_all(echo=print) -> bool:
    ok = True
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            passed = bool(fn())
        except Exception as exc:  # a crashing suite is a failing suite
            echo(f"FAIL {name} ({type(exc).__name__}: {exc})")
            ok = False
            continue
        echo(f"{'PASS' if passed else 'FAIL'} {name} ({time.perf_counter() - t0:.2f}s)")
        ok &= passed
    return ok
