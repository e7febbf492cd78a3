"""Flat ``key = value`` run configuration with a closed schema.

Lines starting with ``#`` (and trailing ``# ...``) are comments. Unknown
keys, duplicate keys and unparsable values are errors.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text

    return parse


# key: (parser, default, help)
SCHEMA: dict[str, tuple[Any, Any, str]] = {
    "frames": (int, 1, "visual units T (one frame per unit)"),
    "height": (int, 24, "tokens per frame along H"),
    "width": (int, 24, "tokens per frame along W"),
    "d": (int, 32, "key/value dimension per head"),
    "layers": (int, 1, "attention layers"),
    "heads": (int, 1, "attention heads per layer"),
    "block_t": (int, 1, "region extent along T"),
    "block_h": (int, 6, "region extent along H"),
    "block_w": (int, 6, "region extent along W"),
    "top_k": (int, 2, "regions selected per head and query"),
    "context_tokens": (int, 4, "learnable context tokens per unit"),
    "attention": (_choice("gaze", "dense"), "gaze", "gaze or dense attention"),
    "seed": (int, 7, "random seed"),
    "precision": (_choice("double", "single"), "double", "KV storage precision"),
    "bytes_per_element": (int, 4, "bytes per element for transfer/memory accounting"),
    "residency": (_choice("persistent", "reset-per-step"), "persistent", "fast-tier residency policy"),
    "text_length": (int, 8, "prompt text tokens after the visual units"),
    "decode_steps": (int, 8, "decoding steps (decode) / steps to amortize context prefill over (cost)"),
    "needles": (int, 4, "distinct needle regions cycled through while decoding"),
    "noise": (float, 0.1, "per-token feature noise"),
    "signal_scale": (float, 1.0, "norm of needle/decoy object vectors"),
    "decoys": (_bool, True, "give distractor regions their own object vectors"),
    "heatmap_layer": (int, 0, "layer whose attention is rendered"),
    "heatmap_head": (int, 0, "head whose attention is rendered"),
    "train_steps": (int, 2000, "training steps"),
    "batch_size": (int, 16, "tasks per training step"),
    "lr": (float, 100.0, "gradient-descent learning rate"),
    "eval_every": (int, 100, "steps between hit-rate evaluations"),
    "holdout": (int, 500, "held-out tasks for the hit rate"),
    "final_ratio": (float, 0.1, "final region-selection ratio of the schedule"),
    "decay_end_fraction": (float, 0.6, "fraction of training after which the ratio stays fixed"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    values: tuple

    def __getattr__(self, name):
        for k, v in self.values:
            if k == name:
                return v
        raise AttributeError(name)

    def as_dict(self) -> dict:
        return dict(self.values)

    def replace(self, **changes) -> "RunConfig":
        d = self.as_dict()
        for k, v in changes.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = v
        return RunConfig(tuple(sorted(d.items())))

    def dump(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.values]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def default_config() -> RunConfig:
    return RunConfig(tuple(sorted((k, spec[1]) for k, spec in SCHEMA.items())))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {k: spec[1] for k, spec in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(tuple(sorted(values.items())))


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def schema_help() -> str:
    width = max(map(len, SCHEMA))
    return "\n".join(f"  {k.ljust(width)}  {_fmt(spec[1])!s:>14}  {spec[2]}" for k, spec in SCHEMA.items())
