#!/usr/bin/env python3
"""Per-convolution gradient cancellation table for a batch-normalized net
and its unnormalized twin at initialization.

For each kernel gradient, `a` sums |contribution| over batch and position,
`b` is |sum of contributions|; a/b near 1 means the summands agree in sign,
large means they cancel. The two partial columns group the sum within each
example or each position first.

    python3 scripts/coherence_table.py --depth 20 --width 12
"""
import argparse

import numpy as np

from bnlab.diagnostics import sign_coherence
from bnlab.harness.data import preprocess, synth_dataset
from bnlab.nn import NetworkConfig, build_network
from bnlab.tensor import SeededRng


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depth", type=int, default=20)
    ap.add_argument("--width", type=int, default=12)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--residual", action="store_true", default=True)
    args = ap.parse_args()

    train = synth_dataset(10, 32, shape=(3, 8, 8), separation=10.0, seed=0)
    (train,), _ = preprocess(train)
    x, y = train.images[: args.batch], train.labels[: args.batch]

    for norm in ("batch", "none"):
        cfg = NetworkConfig(depth=args.depth, kind="conv", width=args.width,
                            class_count=10, input_shape=(3, 8, 8), norm=norm,
                            residual=args.residual)
        net = build_network(cfg, SeededRng(args.seed).child(100))
        rows = sign_coherence(net, x, y)
        print(f"\nnorm={norm}")
        print(f"{'layer':>14} {'a':>11} {'batch part.':>12} "
              f"{'spatial part.':>13} {'b':>11} {'a/b':>9}")
        for r in rows:
            print(f"{r.layer:>14} {r.abs_sum:>11.4e} {r.batch_partial:>12.4e} "
                  f"{r.spatial_partial:>13.4e} {r.net_abs:>11.4e} {r.ratio:>9.2f}")
        med = float(np.median([r.ratio for r in rows]))
        print(f"median a/b: {med:.2f}")


if __name__ == "__main__":
    main()
