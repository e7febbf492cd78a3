import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeattn.attention import (
    Projections,
    assemble_gaze_set,
    context_summaries,
    context_summaries_backward,
    dense_attention,
    gaze_attention,
    gaze_attention_backward,
    prefill_with_context,
)
from gazeattn.errors import ContractError, LayoutError
from gazeattn.kv_store import CONTEXT, TEXT, VISUAL, LayerHeadCache, refresh_descriptors
from gazeattn.layout import TokenVolume, tile_regions
from gazeattn.numerics import central_difference, seeded_stream
from gazeattn.routing import top_k
from gazeattn.verify import random_cache


def test_dense_single_pair():
    cache = LayerHeadCache(3)
    cache.append([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], "text")
    out = dense_attention(np.array([0.3, -1.0, 2.0]), cache)
    assert out.weights.tolist() == [1.0]
    assert out.output.tolist() == [4.0, 5.0, 6.0]


def test_dense_equal_keys_average_values():
    cache = LayerHeadCache(2)
    cache.append([[1.0, 1.0], [1.0, 1.0]], [[2.0, 0.0], [0.0, 4.0]], "text")
    assert np.allclose(dense_attention(np.array([0.5, 0.7]), cache).output, [1.0, 2.0], atol=1e-15)


def test_dense_against_mpmath(rng):
    d = 6
    K, V, q = rng.standard_normal((8, d)), rng.standard_normal((8, d)), rng.standard_normal(d)
    cache = LayerHeadCache(d)
    cache.append(K, V, "text")
    mpmath.mp.dps = 40
    s = [mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b) for a, b in zip(q, k)) / mpmath.sqrt(d) for k in K]
    e = [mpmath.exp(x) for x in s]
    z = mpmath.fsum(e)
    ref = [float(mpmath.fsum(e[i] * mpmath.mpf(V[i, c]) for i in range(8)) / z) for c in range(d)]
    assert np.max(np.abs(dense_attention(q, cache).output - ref)) < 1e-12


def test_dense_empty_attended():
    cache = LayerHeadCache(2)
    cache.append([1.0, 0.0], [1.0, 0.0], "text")
    with pytest.raises(ContractError):
        dense_attention(np.ones(2), cache, attended=[])


def _units_cache(rng, units=2, hw=(2, 2), C=2, d=4, text_after=3):
    H, W = hw
    proj = Projections(*(rng.standard_normal((d, d)) for _ in range(3)))
    feats = [rng.standard_normal((H * W, d)) for _ in range(units)]
    ctx = [rng.standard_normal((C, d)) for _ in range(units)]
    pre = prefill_with_context(feats, ctx, proj, H, W)
    if text_after:
        pre.cache.append(rng.standard_normal((text_after, d)), rng.standard_normal((text_after, d)), "text")
    return pre


def test_gaze_set_composition(rng):
    pre = _units_cache(rng, units=2, hw=(4, 4), C=2)
    cache = pre.cache
    table = refresh_descriptors(cache, tile_regions(pre.volume, 1, 2, 2))
    empty = assemble_gaze_set(cache, [], table)
    assert set(empty.indices) == set(cache.positions(TEXT)) | set(cache.positions(CONTEXT))
    full = assemble_gaze_set(cache, range(table.n_regions), table)
    assert sorted(full.indices.tolist()) == list(range(cache.n))
    assert full.indices[: full.n_text].tolist() == cache.positions(TEXT).tolist()
    part = assemble_gaze_set(cache, [5, 1], table)
    assert part.indices[part.n_text + part.n_context:].tolist() == table.tokens_of(1).tolist() + table.tokens_of(5).tolist()
    with pytest.raises(IndexError):
        assemble_gaze_set(cache, [table.n_regions], table)


def test_worked_example_gaze_set_size():
    U, H, W, C, d = 8, 24, 24, 4, 2
    proj = Projections(np.eye(d), np.eye(d), np.eye(d))
    rng = seeded_stream(0)
    pre = prefill_with_context([rng.standard_normal((H * W, d)) for _ in range(U)],
                               [rng.standard_normal((C, d)) for _ in range(U)], proj, H, W)
    table = refresh_descriptors(pre.cache, tile_regions(pre.volume, 1, 6, 6))
    assert table.n_regions == 128
    ks = assemble_gaze_set(pre.cache, range(20), table)
    assert ks.n_visual + ks.n_context == 752
    assert pre.volume.n_visual == 4608


def test_full_selection_matches_dense_and_no_visual_case(rng):
    cache, table = random_cache(rng, 8, 3, (6, 6), 2)
    q = rng.standard_normal(8)
    g = gaze_attention(q, cache, table, k=table.n_regions)
    assert np.max(np.abs(g.output - dense_attention(q, cache).output)) < 1e-12
    text_only = LayerHeadCache(8)
    text_only.append(rng.standard_normal((5, 8)), rng.standard_normal((5, 8)), "text")
    empty_table = refresh_descriptors(text_only, [])
    assert np.allclose(gaze_attention(q, text_only, empty_table, selection=[]).output,
                       dense_attention(q, text_only).output, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([8, 64]), st.integers(0, 6))
def test_full_selection_property(seed, d, n_text):
    rng = seeded_stream(seed)
    cache, table = random_cache(rng, d, n_text, (6, 6), 1)
    q = rng.standard_normal(d) * 3
    out = gaze_attention(q, cache, table, k=table.n_regions + 3)
    assert abs(out.weights.sum() - 1) < 1e-12
    assert np.max(np.abs(out.output - dense_attention(q, cache).output)) <= 1e-10


def test_needle_region_dominates():
    d, H, W = 8, 4, 4
    N = H * W
    vol = TokenVolume(1, H, W)
    regions = tile_regions(vol, 1, 2, 2)
    needle = 2
    keys = np.zeros((N, d))
    values = np.zeros((N, d))
    for r in regions:
        values[r.token_indices, r.region_id] = 1.0
        keys[r.token_indices, 1 + r.region_id] = 1.0  # orthogonal to the query
    a = 20.0 * np.sqrt(d)
    keys[regions[needle].token_indices] = np.eye(d)[0]
    cache = LayerHeadCache.from_arrays(keys, values, np.full(N, VISUAL), np.zeros(N))
    table = refresh_descriptors(cache, regions)
    q = a * np.eye(d)[0]
    out_all = gaze_attention(q, cache, table, k=4)
    expected = 4 * np.exp(20.0) / (4 * np.exp(20.0) + 12)  # closed-form softmax share of the needle
    assert abs(out_all.output[needle] - expected) < 1e-12
    out = gaze_attention(q, cache, table, k=1)
    assert out.selection.region_ids.tolist() == [needle]
    assert out.output[needle] > 0.99


def test_prefill_context_mask(rng):
    pre = _units_cache(rng, units=2, hw=(3, 3), C=2, text_after=0)
    cache = pre.cache
    unit1_ctx_rows = [i for i, p in enumerate(np.flatnonzero(cache.segment == CONTEXT)) if cache.unit_id[p] == 1]
    unit0 = np.flatnonzero(cache.unit_id == 0)
    for r in unit1_ctx_rows:
        assert np.all(pre.context_weights[r, unit0] == 0)
        assert abs(pre.context_weights[r].sum() - 1) < 1e-12
    # first context token of a unit cannot see its peer
    first = pre.context_weights[0]
    assert first[cache.positions(CONTEXT)[1]] == 0


def test_prefill_identical_values_convex_combination(rng):
    d, C = 4, 3
    v = np.array([0.5, -1.0, 2.0, 0.25])
    proj = Projections(rng.standard_normal((d, d)), rng.standard_normal((d, d)), np.eye(d))
    X = np.tile(v, (4, 1))  # identity value map -> all visual values equal v
    E = rng.standard_normal((C, d))
    pre = prefill_with_context([X], [E], proj, 2, 2)
    for c in range(C):
        w = pre.context_weights[c]
        vis = w[:4].sum()
        own = w[4 : 4 + C] @ E
        assert np.allclose(pre.context_outputs[c], vis * v + own, atol=1e-12)


def test_prefill_counts_and_offsets(rng):
    U, C, H, W, d = 8, 4, 2, 3, 4
    proj = Projections(*(rng.standard_normal((d, d)) for _ in range(3)))
    pre = prefill_with_context([rng.standard_normal((H * W, d)) for _ in range(U)],
                               [rng.standard_normal((C, d)) for _ in range(U)], proj, H, W)
    ctx = pre.cache.positions(CONTEXT)
    assert len(ctx) == 32
    expected = [u * (H * W + C) + H * W + c for u in range(U) for c in range(C)]
    assert ctx.tolist() == expected
    assert np.bincount(pre.cache.unit_id[ctx]).tolist() == [4] * 8


def test_prefill_rejects_empty_unit(rng):
    proj = Projections(np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(LayoutError):
        prefill_with_context([np.zeros((0, 2))], [np.zeros((1, 2))], proj, 1, 1)


def test_context_always_visible(rng):
    pre = _units_cache(rng, units=3, hw=(4, 4), C=2)
    table = refresh_descriptors(pre.cache, tile_regions(pre.volume, 1, 2, 2))
    ctx = set(pre.cache.positions(CONTEXT))
    for _ in range(20):
        out = gaze_attention(rng.standard_normal(4), pre.cache, table, k=int(rng.integers(1, 4)))
        assert ctx <= set(out.indices.tolist())


def _fd_check(analytic, numeric):
    tol = np.maximum(1e-7, 1e-5 * np.abs(analytic))
    assert np.all(np.abs(analytic - numeric) <= tol)


def test_backward_zero_upstream_and_zero_mask(rng):
    cache, table = random_cache(rng, 8, 2, (4, 4), 1, block=(1, 2, 2))
    q = rng.standard_normal(8)
    out = gaze_attention(q, cache, table, k=2)
    zero = gaze_attention_backward(q, cache, table, out.selection, np.zeros(8), forward=out)
    assert not zero.query.any() and not zero.keys.any() and not zero.values.any()
    g = gaze_attention_backward(q, cache, table, out.selection, rng.standard_normal(8), forward=out)
    outside = np.setdiff1d(np.arange(cache.n), out.indices)
    assert outside.size > 0
    assert np.all(g.keys[outside] == 0) and np.all(g.values[outside] == 0)


def test_backward_selection_mismatch(rng):
    cache, table = random_cache(rng, 8, 2, (4, 4), 1, block=(1, 2, 2))
    q = rng.standard_normal(8)
    out = gaze_attention(q, cache, table, k=1)
    other = top_k(-np.arange(table.n_regions, dtype=float), 1)
    if other == out.selection:
        other = top_k(np.arange(table.n_regions, dtype=float), 1)
    with pytest.raises(ContractError):
        gaze_attention_backward(q, cache, table, other, np.ones(8), forward=out)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = seeded_stream(seed)
    cache, table = random_cache(rng, 8, 2, (2, 4), 1, block=(1, 2, 2))  # 2 regions, d = 8
    q = rng.standard_normal(8)
    up = rng.standard_normal(8)
    out = gaze_attention(q, cache, table, k=1)
    sel = out.selection
    grads = gaze_attention_backward(q, cache, table, sel, up, forward=out)

    _fd_check(grads.query, central_difference(lambda x: gaze_attention(x, cache, table, selection=sel).output @ up, q))

    def with_rows(keys=None, values=None):
        return LayerHeadCache.from_arrays(cache.keys if keys is None else keys,
                                          cache.values if values is None else values,
                                          cache.segment, cache.unit_id)

    fk = central_difference(lambda K: gaze_attention(q, with_rows(keys=K), table, selection=sel).output @ up, cache.keys)
    fv = central_difference(lambda V: gaze_attention(q, with_rows(values=V), table, selection=sel).output @ up, cache.values)
    _fd_check(grads.keys, fk)
    _fd_check(grads.values, fv)


def test_context_summary_backward_matches_fd(rng):
    d, n, C = 4, 5, 3
    q0, k0, v0 = (rng.standard_normal((C, d)) for _ in range(3))
    Ku, Vu = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    gk, gv = rng.standard_normal((C, d)), rng.standard_normal((C, d))

    def f(flat):
        parts = np.split(flat, np.cumsum([C * d] * 3 + [n * d]))
        a, b, c, K, V = (p.reshape(-1, d) for p in parts)
        kc, vc, _ = context_summaries(a, b, c, K, V)
        return float((kc * gk).sum() + (vc * gv).sum())

    x = np.concatenate([a.ravel() for a in (q0, k0, v0, Ku, Vu)])
    _, _, W = context_summaries(q0, k0, v0, Ku, Vu)
    analytic = np.concatenate([g.ravel() for g in context_summaries_backward(q0, k0, v0, Ku, Vu, W, gk, gv)])
    _fd_check(analytic, central_difference(f, x))
