"""Synthetic multi-layer, multi-head decoding with per-step routing traces and heatmaps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from . import kernels
from .attention import Projections, dense_attention, gaze_attention, prefill_with_context
from .config import RunConfig
from .kv_store import TEXT, LayerHeadCache, RegionTable, TierState, load_regions, refresh_descriptors, reset_residency
from .layout import TokenVolume, tile_regions
from .numerics import seeded_stream
from .routing import score_regions, top_k
from .trainer import random_orthogonal

# query/key gain: makes a matching object dominate the softmax
_SHARPNESS = 4.0

TRACE_COLUMNS = ("step", "layer", "head", "selected_region_ids", "max_score")


@dataclass(eq=False)
class HeadState:
    cache: LayerHeadCache
    table: RegionTable
    proj: Projections
    tier: TierState
    volume: TokenVolume


@dataclass(eq=False)
class DecodeResult:
    trace_rows: list = field(default_factory=list)
    heatmaps: dict = field(default_factory=dict)
    """step -> (H, T*W) uint8 grid"""
    weights: dict = field(default_factory=dict)
    """step -> (attended indices, weights) of the rendered head"""
    heads: list = field(default_factory=list)
    needles: list = field(default_factory=list)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for step, layer, head, ids, best in self.trace_rows:
            w.writerow((step, layer, head, " ".join(map(str, ids)), repr(best)))
        return buf.getvalue()

    def transfer_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("layer", "head", "load_events", "regions_loaded", "bytes_transferred"))
        tot = [0, 0, 0]
        for hs in self.heads:
            t = hs.tier
            w.writerow((hs.cache.layer, hs.cache.head, t.total_load_events, t.total_regions_loaded, t.total_bytes_transferred))
            tot[0] += t.total_load_events
            tot[1] += t.total_regions_loaded
            tot[2] += t.total_bytes_transferred
        w.writerow(("total", "", *tot))
        return buf.getvalue()


def build_scene(cfg: RunConfig):
    """Raw features of every visual unit plus the decoding queries.

    Every region carries an object vector; ``needles`` of them are the
    targets that successive decoding queries point at.
    """
    rng = seeded_stream(cfg.seed)
    scene_rng, weight_rng = rng.spawn(2)
    d = cfg.d
    volume = TokenVolume(cfg.frames, cfg.height, cfg.width)
    regions = tile_regions(volume, cfg.block_t, cfg.block_h, cfg.block_w)
    X = cfg.noise * scene_rng.standard_normal((volume.n_visual, d))
    objects = scene_rng.standard_normal((len(regions), d))
    objects *= cfg.signal_scale / np.linalg.norm(objects, axis=1, keepdims=True)
    for r in regions:
        if cfg.decoys:
            X[r.token_indices] += objects[r.region_id]
    needles = scene_rng.choice(len(regions), size=min(cfg.needles, len(regions)), replace=False)
    if not cfg.decoys:
        for g in needles:
            X[regions[g].token_indices] += objects[g]
    queries = np.stack([objects[needles[s % len(needles)]] + cfg.noise * scene_rng.standard_normal(d)
                        for s in range(cfg.decode_steps)]) if cfg.decode_steps else np.zeros((0, d))
    text = cfg.noise * scene_rng.standard_normal((cfg.text_length, d))
    ctx = scene_rng.standard_normal((cfg.frames, cfg.context_tokens, d)) / sqrt(d)
    return X, text, ctx, queries, [int(g) for g in needles], weight_rng


def prepare_heads(cfg: RunConfig):
    X, text, ctx, queries, needles, weight_rng = build_scene(cfg)
    hw = cfg.height * cfg.width
    units = [X[u * hw : (u + 1) * hw] for u in range(cfg.frames)]
    heads = []
    for layer in range(cfg.layers):
        for head in range(cfg.heads):
            # q.k = f R D R^T x with a per-head positive diagonal D: every head
            # favours the matching object but scores differ from head to head
            R = random_orthogonal(weight_rng, cfg.d)
            D = weight_rng.uniform(0.25, 1.75, cfg.d)
            gain = sqrt(_SHARPNESS * sqrt(cfg.d))
            proj = Projections(query=(R * D) * gain, key=R * gain, value=random_orthogonal(weight_rng, cfg.d))
            pre = prefill_with_context(units, list(ctx), proj, cfg.height, cfg.width,
                                       layer=layer, head=head, precision=cfg.precision)
            cache = pre.cache
            if cfg.text_length:
                cache.append(kernels.matmul(text, proj.key), kernels.matmul(text, proj.value), TEXT)
            regions = tile_regions(pre.volume, cfg.block_t, cfg.block_h, cfg.block_w)
            table = refresh_descriptors(cache, regions)
            heads.append(HeadState(cache, table, proj, TierState(cfg.d, cfg.bytes_per_element), pre.volume))
    return heads, queries, needles


def render_heatmap(volume: TokenVolume, indices: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """(H, T*W) grid, frames side by side, each frame max-normalized to 0..255."""
    grid = np.zeros((volume.frames, volume.height, volume.width))
    for pos, w in zip(indices, weights):
        try:
            t, h, x = volume.coords(int(pos))
        except IndexError:
            continue
        grid[t, h, x] = w
    out = np.zeros_like(grid, dtype=np.uint8)
    for t in range(volume.frames):
        m = grid[t].max()
        if m > 0:
            out[t] = np.floor(grid[t] * (255.0 / m) + 0.5).astype(np.uint8)
    return np.concatenate(list(out), axis=1)


def pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(int(v)) for v in row) for row in img]
    return ("\n".join(lines) + "\n").encode("ascii")


def run_decode(cfg: RunConfig, heatmap_steps=()) -> DecodeResult:
    heads, queries, needles = prepare_heads(cfg)
    res = DecodeResult(heads=heads, needles=needles)
    wanted = set(heatmap_steps)
    for step in range(cfg.decode_steps):
        f = queries[step][None, :]
        for hs in heads:
            q = kernels.matmul(f, hs.proj.query)[0]
            # the new token's own KV joins the cache before it attends
            hs.cache.append(kernels.matmul(f, hs.proj.key), kernels.matmul(f, hs.proj.value), TEXT)
            scores = score_regions(q, hs.table)
            if cfg.attention == "dense":
                out = dense_attention(q, hs.cache)
                ids = list(range(hs.table.n_regions))
            else:
                sel = top_k(scores, cfg.top_k)
                out = gaze_attention(q, hs.cache, hs.table, selection=sel)
                ids = [int(g) for g in sel.region_ids]
            if cfg.residency == "reset-per-step":
                reset_residency(hs.tier)
            load_regions(hs.tier, ids, hs.table.sizes)
            res.trace_rows.append((step, hs.cache.layer, hs.cache.head, ids, float(scores.max())))
            if step in wanted and hs.cache.layer == cfg.heatmap_layer and hs.cache.head == cfg.heatmap_head:
                res.heatmaps[step] = render_heatmap(hs.volume, out.indices, out.weights)
                res.weights[step] = (out.indices, out.weights)
    return res
