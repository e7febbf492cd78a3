import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeattn.errors import DimensionError
from gazeattn.kv_store import VISUAL, LayerHeadCache, refresh_descriptors
from gazeattn.layout import TokenVolume, tile_regions
from gazeattn.routing import Schedule, ratio_to_k, schedule_ratio, score_regions, top_k


def sort_oracle(scores, k):
    return set(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k])


def table_with_descriptors(desc):
    """One-token regions whose descriptors equal the given rows."""
    G, d = desc.shape
    cache = LayerHeadCache.from_arrays(desc, np.zeros_like(desc), np.full(G, VISUAL), np.zeros(G))
    return refresh_descriptors(cache, tile_regions(TokenVolume(1, 1, G), 1, 1, 1))


def test_scores_orthogonal_and_basis():
    table = table_with_descriptors(np.eye(5)[1:])
    assert np.all(score_regions(np.eye(5)[0], table) == 0)
    basis = table_with_descriptors(np.eye(4))
    assert score_regions(np.eye(4)[0], basis).tolist() == [1, 0, 0, 0]


def test_scores_match_dot_oracle(rng):
    desc = rng.standard_normal((20, 16))
    q = rng.standard_normal(16)
    ref = [float(np.longdouble(0) + sum(np.longdouble(a) * np.longdouble(b) for a, b in zip(q, row))) for row in desc]
    assert np.max(np.abs(score_regions(q, table_with_descriptors(desc)) - ref)) < 1e-12


def test_scores_dimension_error(rng):
    with pytest.raises(DimensionError):
        score_regions(np.ones(3), table_with_descriptors(rng.standard_normal((2, 4))))


def test_top_k_examples():
    assert top_k([3, 1, 2], 2).as_set() == {0, 2}
    assert top_k([5, 5, 1], 1).region_ids.tolist() == [0]
    assert top_k([1.0], 5).region_ids.tolist() == [0]
    with pytest.raises(DimensionError):
        top_k([], 1)


def test_top_k_matches_sort_oracle(rng):
    for i in range(1000):
        G = int(rng.integers(1, 200))
        s = rng.standard_normal(G)
        if i % 3 == 0:
            s = np.round(s)  # heavy ties
        k = int(rng.integers(1, G + 1))
        assert top_k(s, k).as_set() == sort_oracle(s.tolist(), k)


@settings(max_examples=60)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=4096), st.data())
def test_top_k_invariants(xs, data):
    s = np.array(xs, dtype=float)
    k = data.draw(st.integers(1, len(xs)))
    sel = top_k(s, k)
    chosen = sel.as_set()
    assert len(chosen) == sel.k == min(k, len(xs))
    rest = [i for i in range(len(xs)) if i not in chosen]
    if rest:
        assert min(s[list(chosen)]) >= max(s[rest])
    assert chosen == sort_oracle(xs, k)
    if k < len(xs):
        assert chosen <= top_k(s, k + 1).as_set()


def test_selection_scale_invariance(rng):
    for _ in range(50):
        desc = rng.standard_normal((12, 8))
        q = rng.standard_normal(8)
        table = table_with_descriptors(desc)
        base = top_k(score_regions(q, table), 3).as_set()
        for c in (1e-3, 1.0, 1e3):
            assert top_k(score_regions(c * q, table), 3).as_set() == base


def test_schedule_endpoints_and_shape():
    assert schedule_ratio(0, 1000) == 1.0
    assert schedule_ratio(600, 1000) == 0.1
    assert schedule_ratio(1000, 1000) == 0.1
    assert schedule_ratio(300, 1000) == 0.55
    vals = [schedule_ratio(s, 500) for s in range(501)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert set(vals[300:]) == {0.1}
    assert schedule_ratio(3, 10, Schedule(final_ratio=0.5, decay_end_fraction=1.0)) == pytest.approx(0.85)


def test_ratio_to_k():
    assert ratio_to_k(1.0, 16) == 16
    assert ratio_to_k(0.1, 128) == 13
    assert ratio_to_k(0.001, 4) == 1
    assert ratio_to_k(0.1, 16) == 2
