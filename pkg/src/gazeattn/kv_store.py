"""Per-layer/per-head KV cache, region descriptors and tiered residency accounting.

The cache is append-only: visual entries are never evicted, routing
chooses afresh among them for every query.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, LayoutError
from .layout import Region, regions_csr
from .numerics import resolve_dtype

TEXT, VISUAL, CONTEXT = 0, 1, 2
SEGMENT_NAMES = {"text": TEXT, "visual": VISUAL, "context": CONTEXT}


def _segment_code(segment) -> int:
    if isinstance(segment, str):
        try:
            return SEGMENT_NAMES[segment]
        except KeyError:
            raise ValueError(f"unknown segment {segment!r}") from None
    if segment not in (TEXT, VISUAL, CONTEXT):
        raise ValueError(f"unknown segment code {segment!r}")
    return int(segment)


class LayerHeadCache:
    """Keys/values of one (layer, head) plus per-position segment and unit labels.

    Storage grows geometrically; the public ``keys``/``values``/``segment``/
    ``unit_id`` properties are read-only views of the filled prefix.
    """

    def __init__(self, d: int, layer: int = 0, head: int = 0, precision="double", capacity: int = 64):
        if d < 1:
            raise DimensionError("key dimension must be >= 1")
        self.d = int(d)
        self.layer = int(layer)
        self.head = int(head)
        self.dtype = resolve_dtype(precision)
        cap = max(int(capacity), 1)
        self._k = np.empty((cap, self.d), dtype=self.dtype)
        self._v = np.empty((cap, self.d), dtype=self.dtype)
        self._seg = np.empty(cap, dtype=np.uint8)
        self._unit = np.empty(cap, dtype=np.int64)
        self._n = 0

    @classmethod
    def from_arrays(cls, keys, values, segment, unit_id, layer=0, head=0, precision="double"):
        keys = np.asarray(keys)
        cache = cls(keys.shape[1], layer, head, precision, capacity=keys.shape[0])
        segment = np.asarray(segment, dtype=np.uint8)
        unit_id = np.asarray(unit_id, dtype=np.int64)
        if not (len(segment) == len(unit_id) == keys.shape[0] == np.asarray(values).shape[0]):
            raise DimensionError("keys, values, segment and unit_id must have equal lengths")
        if np.any(segment > CONTEXT):
            raise ValueError("segment codes must be 0 (text), 1 (visual) or 2 (context)")
        cache._append_raw(keys, values, segment, unit_id)
        return cache

    def __len__(self) -> int:
        return self._n

    @property
    def n(self) -> int:
        return self._n

    def _view(self, arr):
        v = arr[: self._n]
        v.flags.writeable = False
        return v

    @property
    def keys(self) -> np.ndarray:
        return self._view(self._k)

    @property
    def values(self) -> np.ndarray:
        return self._view(self._v)

    @property
    def segment(self) -> np.ndarray:
        return self._view(self._seg)

    @property
    def unit_id(self) -> np.ndarray:
        return self._view(self._unit)

    def positions(self, segment) -> np.ndarray:
        return np.flatnonzero(self.segment == _segment_code(segment))

    def _reserve(self, extra: int):
        need = self._n + extra
        cap = self._k.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_k", "_v", "_seg", "_unit"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def _append_raw(self, keys, values, segment, unit_id):
        rows = keys.shape[0]
        self._reserve(rows)
        sl = slice(self._n, self._n + rows)
        self._k[sl] = keys
        self._v[sl] = values
        self._seg[sl] = segment
        self._unit[sl] = unit_id
        self._n += rows

    def append(self, keys, values, segment, unit_id: int | None = None) -> "LayerHeadCache":
        return append_kv(self, keys, values, segment, unit_id)


def append_kv(cache: LayerHeadCache, keys, values, segment, unit_id: int | None = None) -> LayerHeadCache:
    """Append rows at the end of ``cache`` (in place) and return it."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if keys.shape != values.shape or keys.shape[1] != cache.d:
        raise DimensionError(f"rows of shape {keys.shape}/{values.shape} do not fit d={cache.d}")
    code = _segment_code(segment)
    if code == TEXT:
        uid = -1
    else:
        if unit_id is None or unit_id < 0:
            raise LayoutError("visual and context rows need a non-negative unit_id")
        uid = int(unit_id)
    rows = keys.shape[0]
    cache._append_raw(keys, values, np.full(rows, code, np.uint8), np.full(rows, uid, np.int64))
    return cache


@dataclass
class RegionTable:
    """Regions of one (layer, head) with their mean-pooled key descriptors."""

    layer: int
    head: int
    regions: list[Region]
    descriptors: np.ndarray
    dirty: np.ndarray
    flat_idx: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def tokens_of(self, region_id: int) -> np.ndarray:
        return self.flat_idx[self.offsets[region_id] : self.offsets[region_id + 1]]

    def mark_dirty(self, region_ids: Iterable[int] | None = None):
        if region_ids is None:
            self.dirty[:] = True
        else:
            self.dirty[list(region_ids)] = True

    def refresh(self, cache: LayerHeadCache) -> "RegionTable":
        """Recompute descriptors of dirty regions only."""
        todo = np.flatnonzero(self.dirty)
        if todo.size == 0:
            return self
        if todo.size == self.n_regions:
            self.descriptors = kernels.segment_means(cache.keys, self.flat_idx, self.offsets)
        else:
            for g in todo:
                sub = np.array([0, self.offsets[g + 1] - self.offsets[g]], dtype=np.int64)
                self.descriptors[g] = kernels.segment_means(cache.keys, self.tokens_of(g), sub)[0]
        self.dirty[:] = False
        return self


def refresh_descriptors(cache: LayerHeadCache, regions: Sequence[Region]) -> RegionTable:
    """Build a :class:`RegionTable` whose descriptors are region key means."""
    flat, offsets = regions_csr(list(regions))
    if flat.size:
        if flat.min() < 0 or flat.max() >= cache.n:
            raise LayoutError(f"region references positions outside [0, {cache.n})")
        if np.any(cache.segment[flat] != VISUAL):
            raise LayoutError("region references a non-visual cache position")
    if np.any(np.diff(offsets) == 0):
        raise LayoutError("empty region")
    table = RegionTable(
        layer=cache.layer,
        head=cache.head,
        regions=list(regions),
        descriptors=np.zeros((len(regions), cache.d)),
        dirty=np.ones(len(regions), dtype=bool),
        flat_idx=flat,
        offsets=offsets,
    )
    return table.refresh(cache)


@dataclass
class TierState:
    """Fast-tier residency of visual regions with transfer counters."""

    d: int
    precision_bytes: int = 4
    resident: set = field(default_factory=set)
    total_bytes_transferred: int = 0
    total_load_events: int = 0
    total_regions_loaded: int = 0

    @property
    def bytes_per_token(self) -> int:
        # one key row and one value row
        return self.d * self.precision_bytes * 2


def load_regions(tier: TierState, selection: Iterable[int], region_sizes: Sequence[int]) -> tuple[int, int]:
    """Mark selected regions resident; returns ``(new_bytes, newly_loaded)``."""
    n_regions = len(region_sizes)
    ids = [int(g) for g in selection]
    for g in ids:
        if not 0 <= g < n_regions:
            raise IndexError(f"unknown region id {g}")
    new_bytes = 0
    loaded = 0
    for g in sorted(set(ids)):
        if g in tier.resident:
            continue
        tier.resident.add(g)
        new_bytes += int(region_sizes[g]) * tier.bytes_per_token
        loaded += 1
    tier.total_bytes_transferred += new_bytes
    tier.total_load_events += 1
    tier.total_regions_loaded += loaded
    return new_bytes, loaded


def reset_residency(tier: TierState) -> TierState:
    tier.resident.clear()
    return tier


# ---------------------------------------------------------------------------
# binary snapshots
#
# All integers and floats little-endian; matrices row-major (row stride d).
# cache file:  "GZKV" u16 version u32 layer u32 head u64 N u32 d u8 precision_bytes
#              keys[N*d] values[N*d] segment u8[N] unit_id i32[N]
# param file:  u32 count, then per tensor
#              "GZPR" u16 version u16 name_len name(utf-8) u64 rows u32 cols u8 precision_bytes
#              data[rows*cols]
# ---------------------------------------------------------------------------

SNAPSHOT_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHIIQIB")
_TENSOR_HEADER = struct.Struct("<4sHH")
_TENSOR_SHAPE = struct.Struct("<QIB")


def _float_code(nbytes: int) -> str:
    return {4: "<f4", 8: "<f8"}[nbytes]


def save_cache(path, cache: LayerHeadCache):
    nbytes = cache.dtype.itemsize
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(b"GZKV", SNAPSHOT_VERSION, cache.layer, cache.head, cache.n, cache.d, nbytes))
        fh.write(np.ascontiguousarray(cache.keys, dtype=_float_code(nbytes)).tobytes())
        fh.write(np.ascontiguousarray(cache.values, dtype=_float_code(nbytes)).tobytes())
        fh.write(cache.segment.astype(np.uint8).tobytes())
        fh.write(cache.unit_id.astype("<i4").tobytes())


def load_cache(path) -> LayerHeadCache:
    raw = Path(path).read_bytes()
    magic, version, layer, head, n, d, nbytes = _CACHE_HEADER.unpack_from(raw, 0)
    if magic != b"GZKV" or version != SNAPSHOT_VERSION:
        raise ValueError(f"not a cache snapshot (magic={magic!r}, version={version})")
    off = _CACHE_HEADER.size
    code = _float_code(nbytes)
    block = n * d * nbytes
    keys = np.frombuffer(raw, dtype=code, count=n * d, offset=off).reshape(n, d)
    values = np.frombuffer(raw, dtype=code, count=n * d, offset=off + block).reshape(n, d)
    off += 2 * block
    seg = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off)
    unit = np.frombuffer(raw, dtype="<i4", count=n, offset=off + n)
    precision = "double" if nbytes == 8 else "single"
    return LayerHeadCache.from_arrays(keys, values, seg, unit, layer, head, precision)


def save_tensors(path, tensors: Sequence[tuple[str, np.ndarray]], precision_bytes: int = 8):
    code = _float_code(precision_bytes)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr)
            mat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
            encoded = name.encode()
            fh.write(_TENSOR_HEADER.pack(b"GZPR", SNAPSHOT_VERSION, len(encoded)))
            fh.write(encoded)
            fh.write(_TENSOR_SHAPE.pack(mat.shape[0], mat.shape[1], precision_bytes))
            fh.write(np.ascontiguousarray(mat, dtype=code).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    (count,) = struct.unpack_from("<I", raw, 0)
    off = 4
    out = {}
    for _ in range(count):
        magic, version, name_len = _TENSOR_HEADER.unpack_from(raw, off)
        if magic != b"GZPR" or version != SNAPSHOT_VERSION:
            raise ValueError("corrupt parameter snapshot")
        off += _TENSOR_HEADER.size
        name = raw[off : off + name_len].decode()
        off += name_len
        rows, cols, nbytes = _TENSOR_SHAPE.unpack_from(raw, off)
        off += _TENSOR_SHAPE.size
        out[name] = np.frombuffer(raw, dtype=_float_code(nbytes), count=rows * cols, offset=off).reshape(rows, cols)
        off += rows * cols * nbytes
    return out
