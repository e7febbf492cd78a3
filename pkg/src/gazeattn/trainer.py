"""Toy single-layer model trained on a synthetic needle-in-region retrieval task.

Each region of the token volume holds an object vector (the needle or a
decoy of equal magnitude) plus per-token noise. The query is the needle's
vector plus noise and the target is the mean of the needle region's raw
features, so the output can only match the target once routing
and attention land on the needle. Routing receives no direct supervision;
it improves only through the selection-masked attention gradients.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import kernels
from .attention import (
    context_summaries,
    context_summaries_backward,
    gaze_attention,
    gaze_attention_backward,
)
from .errors import NumericError
from .kv_store import CONTEXT, VISUAL, LayerHeadCache, refresh_descriptors
from .layout import TokenVolume, regions_csr, tile_regions
from .routing import Schedule, ratio_to_k, schedule_ratio, top_k

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskDims:
    frames: int = 1
    height: int = 24
    width: int = 24
    block: tuple[int, int, int] = (1, 6, 6)
    d: int = 32
    context_tokens: int = 4
    signal_scale: float = 1.0
    decoys: bool = True

    @cached_property
    def raw_volume(self) -> TokenVolume:
        return TokenVolume(self.frames, self.height, self.width)

    @cached_property
    def cache_volume(self) -> TokenVolume:
        return TokenVolume(self.frames, self.height, self.width, frame_gap=self.context_tokens)

    @cached_property
    def raw_regions(self):
        return tile_regions(self.raw_volume, *self.block)

    @cached_property
    def cache_regions(self):
        return tile_regions(self.cache_volume, *self.block)

    @cached_property
    def raw_csr(self):
        return regions_csr(self.raw_regions)

    @cached_property
    def raw_labels(self) -> np.ndarray:
        """Region id of every raw visual token."""
        flat, offsets = self.raw_csr
        labels = np.empty(flat.size, dtype=np.int64)
        labels[flat] = np.repeat(np.arange(offsets.size - 1), np.diff(offsets))
        return labels

    @property
    def n_visual(self) -> int:
        return self.raw_volume.n_visual

    @property
    def n_regions(self) -> int:
        return len(self.raw_regions)

    @property
    def units(self) -> int:
        return self.frames

    @cached_property
    def visual_positions(self) -> np.ndarray:
        return self.cache_volume.positions()

    @cached_property
    def layout(self):
        """Segment and unit labels of the cache: per unit, visual rows then context rows."""
        n_per = self.height * self.width + self.context_tokens
        seg = np.tile(np.r_[np.full(self.height * self.width, VISUAL), np.full(self.context_tokens, CONTEXT)], self.frames)
        unit = np.repeat(np.arange(self.frames), n_per)
        return seg.astype(np.uint8), unit.astype(np.int64)


@dataclass(frozen=True, eq=False)
class NeedleTask:
    features: np.ndarray
    needle: int
    query: np.ndarray
    target: np.ndarray
    noise: float
    signal_scale: float


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def generate_task(rng: np.random.Generator, dims: TaskDims, noise: float) -> NeedleTask:
    if noise < 0:
        raise ValueError("noise must be >= 0")
    d, G = dims.d, dims.n_regions
    flat, offsets = dims.raw_csr
    needle = int(rng.integers(G))
    signal = dims.signal_scale * _unit(rng, d)
    X = noise * rng.standard_normal((dims.n_visual, d))
    objects = np.zeros((G, d))
    objects[needle] = signal
    if dims.decoys:
        others = rng.standard_normal((G - 1, d))
        objects[np.arange(G) != needle] = dims.signal_scale * others / np.linalg.norm(others, axis=1, keepdims=True)
    X += objects[dims.raw_labels]
    query = signal + noise * rng.standard_normal(d)
    target = X[flat[offsets[needle] : offsets[needle + 1]]].mean(axis=0)
    return NeedleTask(features=X, needle=needle, query=query, target=target, noise=noise, signal_scale=dims.signal_scale)


def generate_tasks(rng, dims, noise, count) -> list[NeedleTask]:
    return [generate_task(rng, dims, noise) for _ in range(count)]


PARAM_NAMES = ("query", "key", "value", "context")


@dataclass(eq=False)
class ToyParams:
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    context: np.ndarray
    """(units, context_tokens, d) learnable context embeddings."""

    def arrays(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "ToyParams":
        return ToyParams(*(a.copy() for a in self.arrays()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def unflatten(self, flat) -> "ToyParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return ToyParams(*out)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def random_orthogonal(rng, d) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def init_params(rng: np.random.Generator, dims: TaskDims) -> ToyParams:
    d = dims.d
    return ToyParams(
        query=random_orthogonal(rng, d),
        key=random_orthogonal(rng, d),
        value=random_orthogonal(rng, d),
        context=rng.standard_normal((dims.units, dims.context_tokens, d)) / np.sqrt(d),
    )


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _Forward:
    task: NeedleTask
    q: np.ndarray
    cache: LayerHeadCache
    table: object
    out: object
    ctx: list
    loss: float


def _forward(params: ToyParams, task: NeedleTask, dims: TaskDims, k: int | None, selection=None) -> _Forward:
    X = task.features
    Kv = kernels.matmul(X, params.key)
    Vv = kernels.matmul(X, params.value)
    seg, unit = dims.layout
    N = seg.shape[0]
    keys = np.empty((N, dims.d))
    values = np.empty((N, dims.d))
    vis = dims.visual_positions
    keys[vis] = Kv
    values[vis] = Vv
    hw = dims.height * dims.width
    C = dims.context_tokens
    ctx = []
    if C:
        for u in range(dims.units):
            E = params.context[u]
            q0 = kernels.matmul(E, params.query)
            k0 = kernels.matmul(E, params.key)
            v0 = kernels.matmul(E, params.value)
            Ku, Vu = Kv[u * hw : (u + 1) * hw], Vv[u * hw : (u + 1) * hw]
            kc, vc, ws = context_summaries(q0, k0, v0, Ku, Vu)
            start = u * (hw + C) + hw
            keys[start : start + C] = kc
            values[start : start + C] = vc
            ctx.append((q0, k0, v0, ws))
    cache = LayerHeadCache.from_arrays(keys, values, seg, unit)
    table = refresh_descriptors(cache, dims.cache_regions)
    q = kernels.matmul(task.query[None, :], params.query)[0]
    out = gaze_attention(q, cache, table, selection=selection, k=None if selection is not None else k)
    diff = out.output - task.target
    loss = float(kernels.dot(diff, diff)) / dims.d
    return _Forward(task=task, q=q, cache=cache, table=table, out=out, ctx=ctx, loss=loss)


def _backward(params: ToyParams, fw: _Forward, dims: TaskDims, weight: float, grads: ToyParams):
    task = fw.task
    g_out = (2.0 * weight / dims.d) * (fw.out.output - task.target)
    ag = gaze_attention_backward(fw.q, fw.cache, fw.table, fw.out.selection, g_out, forward=fw.out)
    grads.query += np.outer(task.query, ag.query)
    vis = dims.visual_positions
    dKv = ag.keys[vis]
    dVv = ag.values[vis]
    hw = dims.height * dims.width
    C = dims.context_tokens
    if C:
        Kv = fw.cache.keys[vis]
        Vv = fw.cache.values[vis]
        for u in range(dims.units):
            q0, k0, v0, ws = fw.ctx[u]
            start = u * (hw + C) + hw
            sl = slice(u * hw, (u + 1) * hw)
            dq0, dk0, dv0, dKu, dVu = context_summaries_backward(
                q0, k0, v0, Kv[sl], Vv[sl], ws, ag.keys[start : start + C], ag.values[start : start + C]
            )
            dKv[sl] += dKu
            dVv[sl] += dVu
            E = params.context[u]
            Et = np.ascontiguousarray(E.T)
            grads.query += kernels.matmul(Et, dq0)
            grads.key += kernels.matmul(Et, dk0)
            grads.value += kernels.matmul(Et, dv0)
            grads.context[u] += (
                kernels.matmul(dq0, np.ascontiguousarray(params.query.T))
                + kernels.matmul(dk0, np.ascontiguousarray(params.key.T))
                + kernels.matmul(dv0, np.ascontiguousarray(params.value.T))
            )
    Xt = np.ascontiguousarray(task.features.T)
    grads.key += kernels.matmul(Xt, dKv)
    grads.value += kernels.matmul(Xt, dVv)


def batch_loss(params: ToyParams, batch: Sequence[NeedleTask], dims: TaskDims, k: int | None, selections=None) -> float:
    """Mean MSE over the batch; pass ``selections`` to pin routing."""
    total = 0.0
    for i, task in enumerate(batch):
        sel = None if selections is None else selections[i]
        total += _forward(params, task, dims, k, sel).loss
    return total / len(batch)


def loss_and_grads(params: ToyParams, batch: Sequence[NeedleTask], dims: TaskDims, k: int | None, selections=None):
    """Returns ``(loss, grads, selections)``; routing is redone per task unless pinned."""
    grads = ToyParams(*(np.zeros_like(a, dtype=np.float64) for a in params.arrays()))
    total = 0.0
    used = []
    w = 1.0 / len(batch)
    for i, task in enumerate(batch):
        sel = None if selections is None else selections[i]
        fw = _forward(params, task, dims, k, sel)
        total += fw.loss
        used.append(fw.out.selection)
        _backward(params, fw, dims, w, grads)
    return total * w, grads, used


def step_k(step: int, total_steps: int, dims: TaskDims, schedule: Schedule, use_schedule: bool = True) -> tuple[float, int]:
    ratio = schedule_ratio(step, total_steps, schedule) if use_schedule else schedule.final_ratio
    return ratio, ratio_to_k(ratio, dims.n_regions)


def train_step(params: ToyParams, batch, dims: TaskDims, lr: float, step: int, total_steps: int,
               schedule: Schedule = Schedule(), use_schedule: bool = True):
    """One plain gradient-descent step; returns ``(new_params, loss)``."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    _, k = step_k(step, total_steps, dims, schedule, use_schedule)
    loss, grads, _ = loss_and_grads(params, batch, dims, k)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at step {step}")
    new = ToyParams(*(p - lr * g for p, g in zip(params.arrays(), grads.arrays())))
    if not new.all_finite():
        raise NumericError(f"non-finite parameters after step {step}")
    return new, loss


def routing_hit_rate(params: ToyParams, tasks: Sequence[NeedleTask], dims: TaskDims, k: int) -> float:
    """Fraction of tasks whose TopK selection contains the needle region."""
    if not tasks:
        raise ValueError("need at least one task")
    flat, offsets = dims.raw_csr
    hits = 0
    for task in tasks:
        desc = kernels.segment_means(kernels.matmul(task.features, params.key), flat, offsets)
        q = kernels.matmul(task.query[None, :], params.query)[0]
        scores = kernels.row_scores(q, desc, np.arange(desc.shape[0], dtype=np.int64), 1.0)
        hits += task.needle in top_k(scores, k).as_set()
    return hits / len(tasks)


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    dims: TaskDims = field(default_factory=TaskDims)
    noise: float = 0.1
    steps: int = 2000
    batch_size: int = 16
    lr: float = 100.0
    seed: int = 7
    eval_every: int = 100
    holdout: int = 500
    schedule: Schedule = Schedule()
    use_schedule: bool = True


LOG_COLUMNS = ("step", "ratio", "K", "loss", "hit_rate")


@dataclass(eq=False)
class TrainResult:
    params: ToyParams
    log_rows: list
    initial_loss: float | None
    final_loss: float | None
    final_hit_rate: float
    failed_step: int | None = None

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for step, ratio, k, loss, hit in self.log_rows:
            w.writerow((step, repr(ratio), k, repr(loss), "" if hit is None else repr(hit)))
        return buf.getvalue()


def train(cfg: TrainConfig, progress=None) -> TrainResult:
    """Run the toy training; deterministic for a given config.

    ``final_loss`` is the loss of the final parameters on one more batch
    drawn from the training stream, at the final K.
    """
    from .numerics import seeded_stream

    init_rng, task_rng, eval_rng = seeded_stream(cfg.seed).spawn(3)
    dims = cfg.dims
    params = init_params(init_rng, dims)
    holdout = generate_tasks(eval_rng, dims, cfg.noise, cfg.holdout)
    final_k = ratio_to_k(cfg.schedule.final_ratio, dims.n_regions)
    rows = []
    initial_loss = None
    total = max(cfg.steps, 1)
    for step in range(cfg.steps):
        ratio, k = step_k(step, total, dims, cfg.schedule, cfg.use_schedule)
        batch = generate_tasks(task_rng, dims, cfg.noise, cfg.batch_size)
        try:
            new, loss = train_step(params, batch, dims, cfg.lr, step, total, cfg.schedule, cfg.use_schedule)
        except NumericError:
            log.error("training diverged at step %d; last good step %d", step, step - 1)
            return TrainResult(params, rows, initial_loss, None, routing_hit_rate(params, holdout, dims, final_k), step)
        if initial_loss is None:
            initial_loss = loss
        hit = None
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps - 1):
            hit = routing_hit_rate(params, holdout, dims, final_k)
        rows.append((step, ratio, k, loss, hit))
        if progress is not None:
            progress(step, loss, hit)
        params = new
    final_loss = None
    if cfg.steps:
        batch = generate_tasks(task_rng, dims, cfg.noise, cfg.batch_size)
        final_loss = batch_loss(params, batch, dims, final_k)
    return TrainResult(params, rows, initial_loss, final_loss, routing_hit_rate(params, holdout, dims, final_k))
