#!/usr/bin/env python3
"""Compare a deep residual net with and without batch normalization at a
large learning rate, over several seeds.

Each seed trains two depth-`--depth` networks that share initial weights:
one unnormalized, one batch-normalized. The table reports whether (and at
which step) each run's minibatch loss blew past the divergence threshold.

    python3 scripts/divergence_study.py --out runs/divergence
"""
import argparse
import os

from bnlab.harness.config import parse_config
from bnlab.harness.run import emit, run_experiment

TEMPLATE = """
network.depth = {depth}
network.width = {width}
network.residual = true
network.norm = {norm}
dataset.classes = 10
dataset.per_class = 32
dataset.shape = 3,8,8
train.batch_size = 64
train.base_lr = {lr}
train.epochs = {epochs}
train.schedule = none
train.seed = {seed}
diagnostics.moments = 50
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depth", type=int, default=20)
    ap.add_argument("--width", type=int, default=12)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/divergence")
    args = ap.parse_args()

    print(f"{'norm':>6} {'seed':>4} {'steps':>6} {'diverged':>9} {'at step':>8} {'last loss':>12}")
    for norm in ("none", "batch"):
        for seed in range(args.seeds):
            cfg = parse_config(TEMPLATE.format(
                depth=args.depth, width=args.width, norm=norm,
                lr=args.lr, epochs=args.epochs, seed=seed,
            ))
            art = run_experiment(cfg)
            leg = art.legs[0]
            out_dir = os.path.join(args.out, f"{norm}_seed{seed}")
            emit(art, out_dir)
            at = leg.event.step if leg.event else "-"
            last = leg.metrics[-1][3] if leg.metrics else float("nan")
            print(f"{norm:>6} {seed:>4} {leg.steps:>6} {str(leg.diverged):>9} "
                  f"{at!s:>8} {last:>12.4g}")
    print(f"\nartifacts under {args.out}/")


if __name__ == "__main__":
    main()
