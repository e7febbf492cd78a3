"""Visual token geometry and gaze-region tiling."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np

from . import kernels


@dataclass(frozen=True)
class TokenVolume:
    """A T x H x W grid of visual tokens placed in the KV sequence.

    ``frame_gap`` reserves positions after every frame (used for the
    per-unit context tokens in the interleaved prefill layout); with the
    default of 0 the volume occupies one contiguous run of positions.
    """

    frames: int
    height: int
    width: int
    sequence_offset: int = 0
    frame_gap: int = 0

    def __post_init__(self):
        if min(self.frames, self.height, self.width) < 1:
            raise ValueError(f"volume dims must be >= 1, got {(self.frames, self.height, self.width)}")
        if self.sequence_offset < 0 or self.frame_gap < 0:
            raise ValueError("sequence_offset and frame_gap must be non-negative")

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    @property
    def n_visual(self) -> int:
        return self.frames * self.height * self.width

    @property
    def frame_stride(self) -> int:
        return self.tokens_per_frame + self.frame_gap

    def frame_start(self, t: int) -> int:
        return self.sequence_offset + t * self.frame_stride

    def flat_index(self, t: int, h: int, w: int) -> int:
        return flat_index(self, t, h, w)

    def coords(self, position: int) -> tuple[int, int, int]:
        """Inverse of :meth:`flat_index`."""
        rel = position - self.sequence_offset
        if rel < 0:
            raise IndexError(f"position {position} precedes the volume")
        t, r = divmod(rel, self.frame_stride)
        if t >= self.frames or r >= self.tokens_per_frame:
            raise IndexError(f"position {position} is not a visual token of this volume")
        h, w = divmod(r, self.width)
        return t, h, w

    def positions(self) -> np.ndarray:
        """All visual positions in (t, h, w) order."""
        base = self.sequence_offset + np.arange(self.frames)[:, None] * self.frame_stride
        return (base + np.arange(self.tokens_per_frame)[None, :]).reshape(-1)


def flat_index(volume: TokenVolume, t: int, h: int, w: int) -> int:
    if not (0 <= t < volume.frames and 0 <= h < volume.height and 0 <= w < volume.width):
        raise IndexError(f"coordinate {(t, h, w)} outside volume {(volume.frames, volume.height, volume.width)}")
    return volume.sequence_offset + t * volume.frame_stride + h * volume.width + w


@dataclass(frozen=True, eq=False)
class Region:
    region_id: int
    unit_span: tuple[int, ...]
    token_indices: np.ndarray = field(repr=False)
    extents: tuple[int, int, int]
    origin: tuple[int, int, int]

    @property
    def size(self) -> int:
        return int(self.token_indices.shape[0])

    def same_as(self, other: "Region") -> bool:
        return (
            self.region_id == other.region_id
            and self.unit_span == other.unit_span
            and self.extents == other.extents
            and self.origin == other.origin
            and np.array_equal(self.token_indices, other.token_indices)
        )


def region_count(volume: TokenVolume, r_t: int, r_h: int, r_w: int) -> int:
    return ceil(volume.frames / r_t) * ceil(volume.height / r_h) * ceil(volume.width / r_w)


def tile_csr(volume: TokenVolume, r_t: int, r_h: int, r_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Tiling as ``(flat, offsets)``: region g owns ``flat[offsets[g]:offsets[g+1]]``.

    Same order and contents as ``regions_csr(tile_regions(...))`` without
    building Region objects.
    """
    if min(r_t, r_h, r_w) < 1:
        raise ValueError(f"block extents must be >= 1, got {(r_t, r_h, r_w)}")
    return kernels.tile_csr(volume.frames, volume.height, volume.width, volume.sequence_offset,
                            volume.frame_stride, r_t, r_h, r_w)


def tile_regions(volume: TokenVolume, r_t: int, r_h: int, r_w: int) -> list[Region]:
    """Partition ``volume`` into r_t x r_h x r_w blocks, t-major then h then w.

    Blocks at edges that do not divide evenly are kept as smaller regions.
    """
    flat, offsets = tile_csr(volume, r_t, r_h, r_w)
    T, H, W = volume.frames, volume.height, volume.width
    nh, nw = -(-H // r_h), -(-W // r_w)
    regions = []
    for g in range(offsets.size - 1):
        gt, rest = divmod(g, nh * nw)
        gh, gw = divmod(rest, nw)
        t0, h0, w0 = gt * r_t, gh * r_h, gw * r_w
        t1 = min(t0 + r_t, T)
        idx = flat[offsets[g] : offsets[g + 1]]
        idx.setflags(write=False)
        regions.append(Region(g, tuple(range(t0, t1)), idx,
                              (t1 - t0, min(h0 + r_h, H) - h0, min(w0 + r_w, W) - w0), (t0, h0, w0)))
    return regions


def regions_csr(regions: list[Region]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated token indices and offsets (``offsets[g]:offsets[g+1]``)."""
    sizes = np.array([r.size for r in regions], dtype=np.int64)
    offsets = np.zeros(len(regions) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    flat = np.concatenate([r.token_indices for r in regions]) if regions else np.zeros(0, np.int64)
    return np.ascontiguousarray(flat, dtype=np.int64), offsets
