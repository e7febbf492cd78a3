"""Command-line entry point: ``gazeattn {verify,decode,cost,train}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, schema_help


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SystemExit(f"error: cannot create output directory {out}: {exc}")
    return out


def _write(path: Path, data):
    try:
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)
    except OSError as exc:
        raise SystemExit(f"error: cannot write {path}: {exc}")


def cmd_verify(args) -> int:
    from . import routing, verify

    if args.inject_fault == "tie-break":
        routing._INVERT_TIE_BREAK = True
    try:
        ok = verify.run_all()
    finally:
        routing._INVERT_TIE_BREAK = False
    print("all suites passed" if ok else "verification FAILED")
    return 0 if ok else 1


def cmd_decode(args) -> int:
    from .decode import pgm_bytes, run_decode

    cfg = load_config(args.config)
    steps = [int(s) for s in args.heatmap_steps.split(",") if s.strip()] if args.heatmap_steps else []
    out = _out_dir(args.out)
    res = run_decode(cfg, steps)
    _write(out / "routing_trace.csv", res.trace_csv())
    for step, img in sorted(res.heatmaps.items()):
        _write(out / f"heatmap_step{step:04d}.pgm", pgm_bytes(img))
    _write(out / "transfer.csv", res.transfer_csv())
    _write(out / "effective_config.conf", cfg.dump())
    total = sum(h.tier.total_bytes_transferred for h in res.heads)
    print(f"decoded {cfg.decode_steps} steps over {len(res.heads)} layer-heads; "
          f"transferred {total} bytes ({cfg.residency})")
    return 0


def geometry_from_config(cfg: RunConfig):
    from .cost_model import ModelGeometry
    from .layout import TokenVolume, region_count

    vol = TokenVolume(cfg.frames, cfg.height, cfg.width)
    return ModelGeometry(
        layers=cfg.layers,
        heads=cfg.heads,
        d=cfg.d,
        precision_bytes=cfg.bytes_per_element,
        n_text=cfg.text_length,
        units=cfg.frames,
        tokens_per_unit=cfg.height * cfg.width,
        region_size=cfg.block_t * cfg.block_h * cfg.block_w,
        region_count=region_count(vol, cfg.block_t, cfg.block_h, cfg.block_w),
        top_k=cfg.top_k,
        context_tokens=cfg.context_tokens,
        dense=cfg.attention == "dense",
        decode_steps=max(cfg.decode_steps, 1),
    )


def cmd_cost(args) -> int:
    from .cost_model import savings_report

    report = savings_report(geometry_from_config(load_config(args.dense)), geometry_from_config(load_config(args.gaze)))
    out = _out_dir(args.out)
    text = report.to_text()
    _write(out / "cost_report.txt", text)
    _write(out / "cost_report.csv", report.to_csv())
    print(text, end="")
    return 0


def train_config_from(cfg: RunConfig, no_schedule: bool = False):
    from .routing import Schedule
    from .trainer import TaskDims, TrainConfig

    dims = TaskDims(
        frames=cfg.frames, height=cfg.height, width=cfg.width,
        block=(cfg.block_t, cfg.block_h, cfg.block_w), d=cfg.d,
        context_tokens=cfg.context_tokens, signal_scale=cfg.signal_scale, decoys=cfg.decoys,
    )
    return TrainConfig(
        dims=dims, noise=cfg.noise, steps=cfg.train_steps, batch_size=cfg.batch_size, lr=cfg.lr,
        seed=cfg.seed, eval_every=cfg.eval_every, holdout=cfg.holdout,
        schedule=Schedule(cfg.final_ratio, cfg.decay_end_fraction), use_schedule=not no_schedule,
    )


def cmd_train(args) -> int:
    from .kv_store import save_tensors
    from .trainer import PARAM_NAMES, train

    cfg = load_config(args.config)
    tcfg = train_config_from(cfg, args.no_schedule)
    out = _out_dir(args.out)
    result = train(tcfg)
    _write(out / "train_log.csv", result.log_csv())
    p = result.params
    ctx = p.context.reshape(-1, p.context.shape[-1]) if p.context.size else p.context.reshape(0, cfg.d)
    save_tensors(out / "params.bin", [(n, ctx if n == "context" else getattr(p, n)) for n in PARAM_NAMES])
    if result.failed_step is not None:
        print(f"error: training diverged at step {result.failed_step}; last good step {result.failed_step - 1}",
              file=sys.stderr)
        return 2
    loss = "n/a" if result.final_loss is None else f"{result.final_loss:.6g}"
    print(f"final loss {loss} (step-0 loss {result.initial_loss}); hit rate {result.final_hit_rate:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazeattn",
        description="Gaze attention: region-routed sparse attention over visual KV caches.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (key = value, '#' comments):\n" + schema_help(),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the built-in invariant suites")
    p.add_argument("--inject-fault", choices=["tie-break"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("decode", help="synthetic decode run with routing traces and heatmaps")
    p.add_argument("--config", required=True)
    p.add_argument("--heatmap-steps", default="", help="comma-separated decoding steps to render")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("cost", help="FLOPs/memory savings report")
    p.add_argument("--dense", required=True)
    p.add_argument("--gaze", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("train", help="train the toy model on the needle task")
    p.add_argument("--config", required=True)
    p.add_argument("--no-schedule", action="store_true", help="use the final selection ratio from step 0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
