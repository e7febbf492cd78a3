"""Dense-training oracle for the toy needle task.

    python3 benchmarks/dense_oracle.py [--config configs/train_default.conf]

Trains with every region selected at every step (selection ratio fixed at
1.0, so attention is dense), then measures what the routing learned:
the TopK hit rate at the sparse K of the config and the loss ratio. If
dense training clears the acceptance thresholds, they are attainable for
the task itself and not an artefact of the sparse schedule.
"""
import argparse
import dataclasses
import time

from gazeattn.cli import train_config_from
from gazeattn.config import load_config
from gazeattn.numerics import seeded_stream
from gazeattn.routing import Schedule, ratio_to_k
from gazeattn.trainer import generate_tasks, routing_hit_rate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/train_default.conf")
    args = ap.parse_args()
    cfg = train_config_from(load_config(args.config))
    sparse_k = ratio_to_k(cfg.schedule.final_ratio, cfg.dims.n_regions)
    dense_cfg = dataclasses.replace(cfg, schedule=Schedule(1.0, cfg.schedule.decay_end_fraction), eval_every=0)
    t0 = time.perf_counter()
    res = train(dense_cfg)
    # same held-out stream as train() uses
    holdout = generate_tasks(seeded_stream(cfg.seed).spawn(3)[2], cfg.dims, cfg.noise, cfg.holdout)
    hit = routing_hit_rate(res.params, holdout, cfg.dims, sparse_k)
    print(f"dense training: {cfg.steps} steps in {time.perf_counter() - t0:.1f}s")
    print(f"step-0 loss {res.initial_loss:.6g}, final loss {res.final_loss:.6g} "
          f"(ratio {res.final_loss / res.initial_loss:.4f})")
    print(f"routing hit rate at K={sparse_k} on {cfg.holdout} held-out tasks: {hit:.4f}")


if __name__ == "__main__":
    main()
