"""Region scoring, TopK selection and the progressive TopK schedule."""
from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from . import kernels
from .errors import DimensionError
from .kv_store import RegionTable

# Flipped only by the ``verify --inject-fault`` negative control.
_INVERT_TIE_BREAK = False


@dataclass(frozen=True)
class Schedule:
    final_ratio: float = 0.1
    decay_end_fraction: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.final_ratio <= 1.0:
            raise ValueError("final_ratio must be in (0, 1]")
        if not 0.0 < self.decay_end_fraction <= 1.0:
            raise ValueError("decay_end_fraction must be in (0, 1]")


@dataclass(frozen=True)
class RoutingConfig:
    top_k: int
    block: tuple[int, int, int] = (1, 6, 6)
    context_tokens: int = 4
    schedule: Schedule = Schedule()

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.context_tokens < 0:
            raise ValueError("context_tokens must be >= 0")
        if min(self.block) < 1:
            raise ValueError("block extents must be >= 1")


@dataclass(frozen=True, eq=False)
class Selection:
    """Chosen region ids for one head, best score first."""

    region_ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.region_ids.flags.writeable = False

    @property
    def k(self) -> int:
        return int(self.region_ids.shape[0])

    def as_set(self) -> frozenset:
        return frozenset(int(g) for g in self.region_ids)

    def __eq__(self, other):
        return isinstance(other, Selection) and np.array_equal(self.region_ids, other.region_ids)

    __hash__ = None


def score_regions(query, table: RegionTable) -> np.ndarray:
    """Raw dot products ``q . d_g`` (no 1/sqrt(d), no temperature)."""
    q = np.ascontiguousarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != table.descriptors.shape[1]:
        raise DimensionError(f"query of shape {q.shape} vs descriptors {table.descriptors.shape}")
    return kernels.row_scores(q, table.descriptors, np.arange(table.n_regions, dtype=np.int64), 1.0)


def top_k(scores, k: int) -> Selection:
    """The ``min(k, G)`` highest scores; ties go to the lower region id."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] == 0:
        raise DimensionError("top_k needs a non-empty score vector")
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = np.arange(s.shape[0])
    tie = -ids if _INVERT_TIE_BREAK else ids
    # lexsort: last key is primary
    order = np.lexsort((tie, -s))[: min(k, s.shape[0])]
    return Selection(region_ids=order.astype(np.int64), scores=s)


def route(query, table: RegionTable, k: int) -> Selection:
    return top_k(score_regions(query, table), k)


def schedule_ratio(step: int, total_steps: int, schedule: Schedule = Schedule()) -> float:
    """Selection ratio: linear from 1 down to ``final_ratio``, then flat."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    progress = min(step / (schedule.decay_end_fraction * total_steps), 1.0)
    # anchored at final_ratio so the plateau value is exact
    return schedule.final_ratio + (1.0 - schedule.final_ratio) * (1.0 - progress)


def ratio_to_k(ratio: float, region_count: int) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    if region_count < 1:
        raise ValueError("region_count must be >= 1")
    return max(1, ceil(ratio * region_count))
