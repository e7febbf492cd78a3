"""Analytical FLOPs and KV-memory accounting for dense vs gaze attention.

All figures are per decoding query, summed over layers and heads.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from math import ceil, log2

from .errors import ContractError

FLOP_CONVENTION = (
    "FLOPs per query, per layer, per head: 2*n*d (scores) + 2*n*d (weighted sum) + 5*n (softmax), "
    "times layers*heads; Route = 2*G*d + G*ceil(log2 G); "
    "Lct = context presence in the attended set + context prefill amortized over decode_steps "
    "(the presence term is also inside Attn)"
)

COLUMNS = ("Attn", "Route", "Lct", "KV Cache")


@dataclass(frozen=True)
class ModelGeometry:
    layers: int
    heads: int
    d: int
    precision_bytes: int = 4
    n_text: int = 0
    units: int = 1
    tokens_per_unit: int = 576
    region_size: int = 36
    region_count: int = 16
    top_k: int = 16
    context_tokens: int = 0
    dense: bool = False
    decode_steps: int = 1

    def __post_init__(self):
        for name in ("layers", "heads", "d", "precision_bytes", "units", "tokens_per_unit",
                     "region_size", "region_count", "top_k", "decode_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.context_tokens < 0 or self.n_text < 0:
            raise ValueError("context_tokens and n_text must be >= 0")
        if self.region_size * self.region_count < self.n_visual:
            raise ValueError("regions do not cover the visual tokens")

    @property
    def n_visual(self) -> int:
        return self.units * self.tokens_per_unit

    @property
    def layer_heads(self) -> int:
        return self.layers * self.heads


def attended_visual_count(geom: ModelGeometry) -> int:
    """``K*m + |C|*U`` for gaze geometries, ``N_v`` for dense ones."""
    if geom.dense:
        return geom.n_visual
    return min(geom.top_k, geom.region_count) * geom.region_size + geom.context_tokens * geom.units


def attention_flops(n_attended: int, geom: ModelGeometry) -> int:
    if n_attended < 1:
        raise ValueError("n_attended must be >= 1")
    return (4 * n_attended * geom.d + 5 * n_attended) * geom.layer_heads


def routing_flops(geom: ModelGeometry) -> int:
    if geom.dense:
        return 0
    G = geom.region_count
    return (2 * G * geom.d + G * ceil(log2(G))) * geom.layer_heads


def context_flops(geom: ModelGeometry) -> int:
    if geom.dense or geom.context_tokens == 0:
        return 0
    C, U = geom.context_tokens, geom.units
    presence = attention_flops(C * U, geom)
    # token c of a unit sees the unit's visual tokens plus c+1 context tokens
    prefill = U * sum(attention_flops(geom.tokens_per_unit + c + 1, geom) for c in range(C))
    return presence + prefill // geom.decode_steps


def kv_bytes(n_tokens: int, geom: ModelGeometry) -> int:
    return n_tokens * geom.d * geom.precision_bytes * 2 * geom.layer_heads


def _saving(gaze: int, dense: int) -> float:
    return round(100.0 * (1.0 - gaze / dense), 1) if dense else 0.0


@dataclass(frozen=True)
class CostReport:
    dense_attn_flops: int
    gaze_attn_flops: int
    routing_flops: int
    context_flops: int
    dense_kv_bytes: int
    gaze_resident_kv_bytes: int
    attn_saving_pct: float
    kv_saving_pct: float
    vision_kv_saving_pct: float
    dense_visual: int
    gaze_visual: int
    gaze_selected_visual: int

    @property
    def fraction_line(self) -> str:
        pct = 100.0 * self.gaze_visual / self.dense_visual
        return f"Attended visual fraction: {self.gaze_visual}/{self.dense_visual} = {pct:.1f}%"

    def rows(self):
        return [
            ("Dense", self.dense_attn_flops, None, None, self.dense_kv_bytes),
            ("Gaze", self.gaze_attn_flops, self.routing_flops, self.context_flops, self.gaze_resident_kv_bytes),
            ("Saving", self.attn_saving_pct, None, None, self.kv_saving_pct),
        ]

    def to_text(self) -> str:
        def cell(name, v):
            if v is None:
                return "--"
            return f"{v:.1f}%" if name == "Saving" else str(v)

        table = [("", *COLUMNS)] + [(r[0], *(cell(r[0], v) for v in r[1:])) for r in self.rows()]
        widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
        lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip()
                 for row in table]
        sel_pct = round(100.0 * (1.0 - self.gaze_selected_visual / self.dense_visual), 1)
        lines += [
            "",
            self.fraction_line,
            f"Vision KV saving (selected regions + context): {self.vision_kv_saving_pct:.1f}%",
            f"Vision KV saving (selected regions only): {sel_pct:.1f}%",
            "",
            FLOP_CONVENTION,
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("row", *COLUMNS))
        for r in self.rows():
            w.writerow((r[0], *("" if v is None else v for v in r[1:])))
        return buf.getvalue()

    @staticmethod
    def parse_csv(text: str) -> dict[str, dict[str, float | int | None]]:
        out = {}
        for rec in csv.DictReader(io.StringIO(text)):
            name = rec.pop("row")
            vals = {}
            for col, raw in rec.items():
                if raw == "":
                    vals[col] = None
                elif name == "Saving":
                    vals[col] = float(raw)
                else:
                    vals[col] = int(raw)
            out[name] = vals
        return out


_SHARED = ("layers", "heads", "d", "precision_bytes")


def savings_report(dense_geom: ModelGeometry, gaze_geom: ModelGeometry) -> CostReport:
    for name in _SHARED:
        if getattr(dense_geom, name) != getattr(gaze_geom, name):
            raise ContractError(f"geometries disagree on {name}")
    dense_vis = attended_visual_count(dense_geom)
    gaze_vis = attended_visual_count(gaze_geom)
    dense_attn = attention_flops(dense_vis + dense_geom.n_text, dense_geom)
    gaze_attn = attention_flops(gaze_vis + gaze_geom.n_text, gaze_geom)
    route = routing_flops(gaze_geom)
    lct = context_flops(gaze_geom)
    dense_kv = kv_bytes(dense_vis + dense_geom.n_text, dense_geom)
    gaze_kv = kv_bytes(gaze_vis + gaze_geom.n_text, gaze_geom)
    if gaze_geom.dense:
        selected = gaze_vis
    else:
        selected = min(gaze_geom.top_k, gaze_geom.region_count) * gaze_geom.region_size
    return CostReport(
        dense_attn_flops=dense_attn,
        gaze_attn_flops=gaze_attn,
        routing_flops=route,
        context_flops=lct,
        dense_kv_bytes=dense_kv,
        gaze_resident_kv_bytes=gaze_kv,
        attn_saving_pct=_saving(gaze_attn, dense_attn),
        kv_saving_pct=_saving(gaze_kv, dense_kv),
        vision_kv_saving_pct=_saving(gaze_vis, dense_vis),
        dense_visual=dense_vis,
        gaze_visual=gaze_vis,
        gaze_selected_visual=selected,
    )
