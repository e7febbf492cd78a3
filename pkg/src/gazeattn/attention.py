"""Dense attention, gaze attention and context-token prefill, forward and backward.

Attended index order inside a gaze key set is fixed: text positions, then
context positions (unit by unit), then visual positions of the selected
regions in region-id order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, LayoutError
from .kv_store import CONTEXT, TEXT, VISUAL, LayerHeadCache, RegionTable
from .layout import TokenVolume
from .routing import Selection, route


@dataclass(frozen=True, eq=False)
class GazeKeySet:
    indices: np.ndarray
    n_text: int
    n_context: int
    region_ids: tuple[int, ...]

    @property
    def n_visual(self) -> int:
        return int(self.indices.shape[0]) - self.n_text - self.n_context

    def __len__(self):
        return int(self.indices.shape[0])


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    output: np.ndarray
    weights: np.ndarray
    indices: np.ndarray
    selection: Selection | None = None
    key_set: GazeKeySet | None = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class AttentionGrads:
    """Gradients w.r.t. the query and every cache row (zero outside the attended set)."""

    query: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    indices: np.ndarray


def _query(query, d) -> np.ndarray:
    q = np.ascontiguousarray(query, dtype=np.float64)
    if q.shape != (d,):
        raise DimensionError(f"query of shape {q.shape}, expected ({d},)")
    return q


def dense_attention(query, cache: LayerHeadCache, attended=None) -> AttentionOutput:
    """``softmax(q K^T / sqrt(d)) V`` over ``attended`` (default: the whole cache)."""
    q = _query(query, cache.d)
    idx = np.arange(cache.n, dtype=np.int64) if attended is None else np.ascontiguousarray(attended, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] == 0:
        raise ContractError("attention needs a non-empty attended index list")
    if idx.min() < 0 or idx.max() >= cache.n:
        raise IndexError(f"attended positions outside [0, {cache.n})")
    out, w = kernels.attend(q, cache.keys, cache.values, idx, 1.0 / sqrt(cache.d))
    return AttentionOutput(output=out, weights=w, indices=idx)


def _selected_ids(selection) -> list[int]:
    if selection is None:
        return []
    if isinstance(selection, Selection):
        return sorted(int(g) for g in selection.region_ids)
    return sorted(int(g) for g in selection)


def assemble_gaze_set(cache: LayerHeadCache, selection, table: RegionTable) -> GazeKeySet:
    """Text positions + all context positions + visual positions of selected regions."""
    ids = _selected_ids(selection)
    if len(set(ids)) != len(ids):
        raise ContractError("selection contains duplicate region ids")
    for g in ids:
        if not 0 <= g < table.n_regions:
            raise IndexError(f"unknown region id {g}")
    text = cache.positions(TEXT)
    ctx = cache.positions(CONTEXT)
    parts = [text, ctx] + [table.tokens_of(g) for g in ids]
    idx = np.ascontiguousarray(np.concatenate(parts), dtype=np.int64)
    return GazeKeySet(indices=idx, n_text=len(text), n_context=len(ctx), region_ids=tuple(ids))


def gaze_attention(query, cache: LayerHeadCache, table: RegionTable, selection=None, k: int | None = None) -> AttentionOutput:
    """Attention restricted to the gaze key set.

    Pass ``k`` to route this query afresh, or an explicit ``selection`` to
    reuse one (e.g. to replay a forward pass for the backward).
    """
    q = _query(query, cache.d)
    if selection is None:
        if k is None:
            raise ContractError("gaze_attention needs either a selection or k")
        selection = route(q, table, k)
    keyset = assemble_gaze_set(cache, selection, table)
    if len(keyset) == 0:
        raise ContractError("gaze key set is empty")
    out, w = kernels.attend(q, cache.keys, cache.values, keyset.indices, 1.0 / sqrt(cache.d))
    sel = selection if isinstance(selection, Selection) else None
    return AttentionOutput(output=out, weights=w, indices=keyset.indices, selection=sel, key_set=keyset)


def gaze_attention_backward(
    query,
    cache: LayerHeadCache,
    table: RegionTable,
    selection,
    upstream_grad,
    forward: AttentionOutput | None = None,
) -> AttentionGrads:
    """Analytic gradients of the gaze output with the selection held fixed.

    TopK is treated as non-differentiable: no gradient reaches the routing
    scores, and cache rows outside the gaze key set get exactly zero.
    """
    q = _query(query, cache.d)
    g = np.ascontiguousarray(upstream_grad, dtype=np.float64)
    if g.shape != (cache.d,):
        raise DimensionError(f"upstream gradient of shape {g.shape}")
    keyset = assemble_gaze_set(cache, selection, table)
    if forward is not None and not np.array_equal(forward.indices, keyset.indices):
        raise ContractError("selection differs from the one used in the forward pass")
    scale = 1.0 / sqrt(cache.d)
    if forward is not None:
        w = forward.weights
    else:
        w = kernels.softmax(kernels.row_scores(q, cache.keys, keyset.indices, scale))
    dq, dk_rows, dv_rows = kernels.attend_backward(q, cache.keys, cache.values, keyset.indices, scale, w, g)
    dK = np.zeros((cache.n, cache.d))
    dV = np.zeros((cache.n, cache.d))
    dK[keyset.indices] = dk_rows
    dV[keyset.indices] = dv_rows
    return AttentionGrads(query=dq, keys=dK, values=dV, indices=keyset.indices)


# ---------------------------------------------------------------------------
# context tokens
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Projections:
    """Input-feature projections, each of shape (d_in, d)."""

    query: np.ndarray
    key: np.ndarray
    value: np.ndarray

    @property
    def d(self) -> int:
        return self.key.shape[1]

    @property
    def d_in(self) -> int:
        return self.key.shape[0]


def context_summaries(q0, k0, v0, unit_keys, unit_values):
    """Masked prefill of one unit's context tokens.

    Token ``c`` attends over the unit's visual rows plus context tokens
    ``0..c`` (its own input projections ``k0``/``v0``). Its cached key and
    value are the attention-weighted means of the keys and values it sees.

    Returns ``(keys, values, weights)``; ``weights`` is (C, n_visual + C),
    zero where masked.
    """
    n_vis, d = unit_keys.shape
    S = np.ascontiguousarray(np.vstack([unit_keys, k0]))
    SV = np.ascontiguousarray(np.hstack([S, np.vstack([unit_values, v0])]))
    out, W = kernels.prefix_attend(np.ascontiguousarray(q0), S, SV, n_vis, 1.0 / sqrt(d))
    return out[:, :d], out[:, d:], W


def context_summaries_backward(q0, k0, v0, unit_keys, unit_values, weights, grad_keys, grad_values):
    """Backward of :func:`context_summaries`.

    Returns gradients ``(dq0, dk0, dv0, d_unit_keys, d_unit_values)``.
    """
    n_vis, d = unit_keys.shape
    S = np.ascontiguousarray(np.vstack([unit_keys, k0]))
    SV = np.ascontiguousarray(np.hstack([S, np.vstack([unit_values, v0])]))
    G = np.ascontiguousarray(np.hstack([grad_keys, grad_values]), dtype=np.float64)
    dq0, dS, dSV = kernels.prefix_attend_backward(np.ascontiguousarray(q0), S, SV, n_vis, 1.0 / sqrt(d), weights, G)
    dS = dS + dSV[:, :d]
    dVS = dSV[:, d:]
    return dq0, dS[n_vis:], dVS[n_vis:], dS[:n_vis], dVS[:n_vis]


@dataclass(eq=False)
class PrefillResult:
    cache: LayerHeadCache
    volume: TokenVolume
    context_weights: np.ndarray
    """(U * C, N) prefill attention of every context token over cache positions."""
    context_outputs: np.ndarray
    """(U * C, d) value part of each context token's prefill output."""


def prefill_with_context(
    visual_features: Sequence[np.ndarray],
    context_embeddings: Sequence[np.ndarray],
    projections: Projections,
    height: int,
    width: int,
    cache: LayerHeadCache | None = None,
    layer: int = 0,
    head: int = 0,
    precision="double",
) -> PrefillResult:
    """Append units as ``[visual rows of u][context rows of u]`` for u = 0, 1, ...

    Visual rows cache their projected keys/values. Each context token's
    prefill attention is masked to its own unit's visual rows, earlier
    context tokens of the same unit, and itself.
    """
    U = len(visual_features)
    if U == 0 or len(context_embeddings) != U:
        raise LayoutError("need one context-embedding block per visual unit")
    if cache is None:
        cache = LayerHeadCache(projections.d, layer, head, precision)
    start = cache.n
    C = np.asarray(context_embeddings[0]).shape[0]
    rows_ctx_w, rows_ctx_out = [], []
    spans = []
    for u in range(U):
        X = np.asarray(visual_features[u], dtype=np.float64)
        E = np.asarray(context_embeddings[u], dtype=np.float64).reshape(-1, projections.d_in)
        if X.ndim != 2 or X.shape[0] == 0:
            raise LayoutError(f"unit {u} has no visual rows")
        if X.shape[0] != height * width:
            raise LayoutError(f"unit {u} has {X.shape[0]} rows, expected {height * width}")
        if E.shape[0] != C:
            raise LayoutError("every unit needs the same number of context tokens")
        Ku = kernels.matmul(X, projections.key)
        Vu = kernels.matmul(X, projections.value)
        vis_start = cache.n
        cache.append(Ku, Vu, VISUAL, u)
        if C:
            q0 = kernels.matmul(E, projections.query)
            k0 = kernels.matmul(E, projections.key)
            v0 = kernels.matmul(E, projections.value)
            kc, vc, ws = context_summaries(q0, k0, v0, Ku, Vu)
            ctx_start = cache.n
            cache.append(kc, vc, CONTEXT, u)
            spans.append((vis_start, X.shape[0], ctx_start, ws))
            rows_ctx_out.append(vc)
    N = cache.n
    for vis_start, n_vis, ctx_start, ws in spans:
        for w in ws:
            row = np.zeros(N)
            row[vis_start : vis_start + n_vis] = w[:n_vis]
            row[ctx_start : ctx_start + len(w) - n_vis] = w[n_vis:]
            rows_ctx_w.append(row)
    volume = TokenVolume(U, height, width, sequence_offset=start, frame_gap=C)
    cw = np.vstack(rows_ctx_w) if rows_ctx_w else np.zeros((0, N))
    co = np.vstack(rows_ctx_out) if rows_ctx_out else np.zeros((0, projections.d))
    return PrefillResult(cache=cache, volume=volume, context_weights=cw, context_outputs=co)
