"""Command-line entry point.

Subcommands: train, probe-loss, rmt-density, rmt-spectrum, rmt-condition,
noise-bound, init-moments, coherence, class-heatmap. Each takes --config
(path to a key = value config file) and --out (artifact directory,
defaulting to the config's out.dir); --seed overrides the config's seed.
Exit codes: 0 success (a recorded divergence is a success), 1 config error,
2 runtime or I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from ..diagnostics import (
    class_grad_heatmap,
    depth_moment_profile,
    loss_step_probe,
    sign_coherence,
)
from ..errors import ConfigError, RunError
from ..nn import build_network
from ..noise import noise_summary, per_example_gradients
from ..rmt import FussCatalanDensity, condition_report, ks_distance, sample_product_spectrum
from ..tensor import SeededRng
from .config import ExperimentConfig, parse_config_file
from .run import (
    PROBE_ALPHAS,
    _write_json,
    emit,
    load_dataset,
    run_experiment,
    write_csv,
)


def _init_state(cfg: ExperimentConfig):
    """The exact network and batch a sweep's first leg would start from."""
    train, test = load_dataset(cfg)
    net = build_network(cfg.network, SeededRng(cfg.seed).child(100))
    b = min(cfg.batch_size, train.n)
    batch = (train.images[:b], train.labels[:b])
    return net, batch, train, test


def _cmd_train(cfg: ExperimentConfig, out: str) -> int:
    artifact = run_experiment(cfg)
    emit(artifact, out)
    for i, leg in enumerate(artifact.legs):
        status = "diverged" if leg.diverged else f"test_acc={leg.final_test_acc:.4f}"
        print(f"leg {i} lr={leg.lr:g}: {leg.steps} steps, {status}")
    if artifact.best_index is not None:
        print(f"best leg: {artifact.best_index} (lr={artifact.legs[artifact.best_index].lr:g})")
    else:
        print("best leg: none (all legs diverged)")
    return 0


def _cmd_probe_loss(cfg: ExperimentConfig, out: str) -> int:
    net, batch, _, _ = _init_state(cfg)
    curve = loss_step_probe(net, batch, PROBE_ALPHAS)
    rows = [
        (float(a), float(r), int(f))
        for a, r, f in zip(curve.alphas, curve.relative, curve.finite)
    ]
    write_csv(os.path.join(out, "probe.csv"), ("alpha", "relative_loss", "finite"), rows)
    return 0


def _cmd_init_moments(cfg: ExperimentConfig, out: str) -> int:
    net, batch, _, _ = _init_state(cfg)
    prof = depth_moment_profile(net, batch[0])
    rows = [(lm.label, lm.mean_abs_mean, lm.mean_variance) for lm in prof.layers]
    write_csv(
        os.path.join(out, "moments.csv"),
        ("layer", "mean_abs_mean", "mean_variance"),
        rows,
    )
    print(f"variance ratio last/first: {prof.variance_ratio():.6g}")
    return 0


def _cmd_coherence(cfg: ExperimentConfig, out: str) -> int:
    net, batch, _, _ = _init_state(cfg)
    rows = [
        (r.layer, r.abs_sum, r.batch_partial, r.spatial_partial, r.net_abs, r.ratio)
        for r in sign_coherence(net, batch[0], batch[1])
    ]
    write_csv(
        os.path.join(out, "coherence.csv"),
        ("layer", "abs_sum", "batch_partial", "spatial_partial", "net_abs", "ratio"),
        rows,
    )
    return 0


def _cmd_class_heatmap(cfg: ExperimentConfig, out: str) -> int:
    net, batch, _, _ = _init_state(cfg)
    h = class_grad_heatmap(net, batch[0], batch[1])
    rows = [
        (i, int(h.labels[i]), *[float(v) for v in h.matrix[i]])
        for i in range(h.matrix.shape[0])
    ]
    k = h.matrix.shape[1]
    write_csv(
        os.path.join(out, "heatmap.csv"),
        ("example", "label", *[f"class_{j}" for j in range(k)]),
        rows,
    )
    write_csv(
        os.path.join(out, "heatmap_stats.csv"),
        ("modal_column", "dominant_fraction"),
        [(h.modal_column, h.dominant_fraction)],
    )
    return 0


def _cmd_rmt_density(cfg: ExperimentConfig, out: str) -> int:
    fc = FussCatalanDensity(cfg.rmt.m)
    lo, hi = fc.support
    xs = np.linspace(lo, hi, cfg.rmt.grid_points + 2)[1:-1]
    rows = [(float(x), float(fc.density(x)), float(fc.cdf(x))) for x in xs]
    write_csv(os.path.join(out, "density.csv"), ("x", "density", "cdf"), rows)
    return 0


def _cmd_rmt_spectrum(cfg: ExperimentConfig, out: str) -> int:
    r = cfg.rmt
    sample = sample_product_spectrum(
        r.m, r.n, r.trials, cfg.seed, sigmas=r.sigmas or None
    )
    rows = [
        (t, i, float(sample.per_trial[t, i]))
        for t in range(r.trials)
        for i in range(r.n)
    ]
    write_csv(os.path.join(out, "spectrum.csv"), ("trial", "index", "eigenvalue"), rows)
    fc = FussCatalanDensity(r.m)
    _write_json(
        os.path.join(out, "spectrum_summary.json"),
        {
            "m": r.m,
            "n": r.n,
            "trials": r.trials,
            "ks_distance_to_limit": ks_distance(sample.eigenvalues, fc.cdf),
        },
    )
    return 0


def _cmd_rmt_condition(cfg: ExperimentConfig, out: str) -> int:
    r = cfg.rmt
    samples = [
        sample_product_spectrum(m, r.n, r.trials, cfg.seed) for m in r.m_list
    ]
    report = condition_report(samples)
    write_csv(
        os.path.join(out, "condition.csv"),
        ("m", "trial", "kappa", "sigma_max", "saturated"),
        [(e.m, e.trial, e.kappa, e.sigma_max, int(e.saturated)) for e in report.entries],
    )
    write_csv(
        os.path.join(out, "condition_summary.csv"),
        ("m", "median_kappa", "mean_kappa", "median_sigma_max", "mean_sigma_max",
         "saturated_trials"),
        [
            (s.m, s.median_kappa, s.mean_kappa, s.median_sigma_max, s.mean_sigma_max,
             s.saturated_trials)
            for s in report.summaries
        ],
    )
    return 0


def _cmd_noise_bound(cfg: ExperimentConfig, out: str) -> int:
    net, _, train, _ = _init_state(cfg)
    z = cfg.noise
    if train.n < z.examples:
        raise ConfigError(
            f"noise.examples = {z.examples} but the training set has {train.n}"
        )
    gs = per_example_gradients(net, train.images[: z.examples], train.labels[: z.examples])
    rows = []
    for lr in z.lrs:
        for b in z.batch_sizes:
            s = noise_summary(gs, lr=lr, batch_size=b, trials=z.trials, seed=cfg.seed)
            rows.append(
                (
                    lr, b, s.noise_constant, s.bound, s.closed_form,
                    s.with_replacement.estimate, s.with_replacement.std_err,
                    s.without_replacement.estimate, s.without_replacement.std_err,
                )
            )
    write_csv(
        os.path.join(out, "noise.csv"),
        ("lr", "batch_size", "noise_constant", "bound", "closed_form",
         "mc_with_estimate", "mc_with_std_err",
         "mc_without_estimate", "mc_without_std_err"),
        rows,
    )
    return 0


_DISPATCH = {
    "train": _cmd_train,
    "probe-loss": _cmd_probe_loss,
    "rmt-density": _cmd_rmt_density,
    "rmt-spectrum": _cmd_rmt_spectrum,
    "rmt-condition": _cmd_rmt_condition,
    "noise-bound": _cmd_noise_bound,
    "init-moments": _cmd_init_moments,
    "coherence": _cmd_coherence,
    "class-heatmap": _cmd_class_heatmap,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bnlab",
        description="Batch-normalization training dynamics laboratory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _DISPATCH:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument(
            "--out", default=None, help="artifact directory (default: config's out.dir)"
        )
        p.add_argument("--seed", type=int, default=None, help="override config seed")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config_file(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = args.out if args.out is not None else cfg.out_dir
        os.makedirs(out, exist_ok=True)
        return _DISPATCH[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        if getattr(exc, "filename", None) == args.config:
            print(f"config error: cannot read {args.config}", file=sys.stderr)
            return 1
        print(f"run error: {exc}", file=sys.stderr)
        return 2
    except (RunError, OSError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
