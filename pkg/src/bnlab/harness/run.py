"""Training loops, diagnostics schedules, learning-rate sweeps, artifacts.

A run trains one leg per learning rate (the sweep list, or just base_lr).
Every leg is seeded from (config.seed, leg index) alone, so legs can run in
any order — or in parallel — and produce identical artifacts. Divergence is
always watched for: a post-update minibatch loss over the threshold stops
the leg and records the captured event in its artifact.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ..diagnostics import (
    DivergenceEvent,
    DivergenceMonitor,
    class_grad_heatmap,
    channel_gradients,
    classwise_gradient_split,
    depth_moment_profile,
    gradient_histogram_stats,
    loss_step_probe,
    mean_vs_grad_pairs,
    sign_coherence,
)
from ..errors import ConfigError
from ..nn import SgdState, build_network, sgd_step
from ..tensor import SeededRng
from .config import ExperimentConfig, echo_config
from .data import LabeledImageSet, augment_batch, load_cifar10_dir, preprocess, synth_dataset

# log-spaced step sizes for the loss probe; 0 is prepended (exact baseline)
PROBE_ALPHAS = tuple([0.0] + list(np.geomspace(1e-5, 10.0, 25)))

METRIC_COLUMNS = ("step", "epoch", "lr", "loss", "train_acc", "test_acc")

_TEST_SEED_OFFSET = 1_000_000_007  # synthetic test split draws from its own seed


@dataclass
class LegResult:
    lr: float
    steps: int
    metrics: list  # rows matching METRIC_COLUMNS
    tables: dict  # instrument name -> (columns, rows)
    diverged: bool
    event: DivergenceEvent | None
    final_test_acc: float


@dataclass
class RunArtifact:
    config_echo: str
    legs: list[LegResult]
    best_index: int | None  # None when every leg diverged
    started: str
    finished: str
    meta: dict = field(default_factory=dict)


def load_dataset(cfg: ExperimentConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Train/test pair per the config, preprocessed with train statistics."""
    d = cfg.dataset
    if d.kind == "cifar10":
        train, test = load_cifar10_dir(d.directory)
    else:
        train = synth_dataset(d.classes, d.per_class, d.shape, d.separation, cfg.seed)
        test = synth_dataset(
            d.classes, d.test_per_class, d.shape, d.separation,
            cfg.seed + _TEST_SEED_OFFSET,
        )
    (train, test), _ = preprocess(train, test)
    return train, test


# --- scheduled instruments --------------------------------------------------


def _moment_rows(net, batch, step):
    prof = depth_moment_profile(net, batch[0])
    return [
        (step, lm.label, lm.mean_abs_mean, lm.mean_variance) for lm in prof.layers
    ]


def _histogram_rows(net, batch, step):
    # distribution of the most recent backward's kernel gradients, per layer
    rows = []
    for layer in net.layers:
        for p in layer.params():
            if p.grad is None or p.value.ndim != 4:
                continue
            s = gradient_histogram_stats(p.grad)
            rows.append(
                (step, p.name, s.mean, s.std, s.excess_kurtosis, s.tail_ratio, s.max_abs)
            )
    return rows


def _coherence_rows(net, batch, step):
    x, labels = batch
    return [
        (step, r.layer, r.abs_sum, r.batch_partial, r.spatial_partial, r.net_abs, r.ratio)
        for r in sign_coherence(net, x, labels)
    ]


def _heatmap_rows(net, batch, step):
    h = class_grad_heatmap(net, batch[0], batch[1])
    return [(step, h.modal_column, h.dominant_fraction)]


def _probe_rows(net, batch, step):
    curve = loss_step_probe(net, batch, PROBE_ALPHAS)
    return [
        (step, float(a), float(r), int(f))
        for a, r, f in zip(curve.alphas, curve.relative, curve.finite)
    ]


def _classwise_rows(net, batch, step):
    parts = classwise_gradient_split(net, batch[0], batch[1])
    return [(step, p.class_index, float(np.linalg.norm(p.flat))) for p in parts]


def _mean_grad_rows(net, batch, step):
    pairs = mean_vs_grad_pairs(net, batch[0], batch[1])
    return [
        (step, p.layer, p.in_channel, p.out_channel, p.input_mean, p.grad_mag)
        for p in pairs
    ]


def _channel_grad_rows(net, batch, step):
    return [
        (step, cg.layer, cg.channel, cg.value)
        for cg in channel_gradients(net, batch[0], batch[1])
    ]


_INSTRUMENT_TABLE = {
    "moments": (("step", "layer", "mean_abs_mean", "mean_variance"), _moment_rows),
    "histogram": (
        ("step", "layer", "mean", "std", "excess_kurtosis", "tail_ratio", "max_abs"),
        _histogram_rows,
    ),
    "coherence": (
        ("step", "layer", "abs_sum", "batch_partial", "spatial_partial", "net_abs", "ratio"),
        _coherence_rows,
    ),
    "heatmap": (("step", "modal_column", "dominant_fraction"), _heatmap_rows),
    "probe": (("step", "alpha", "relative_loss", "finite"), _probe_rows),
    "classwise": (("step", "class_index", "grad_norm"), _classwise_rows),
    "mean_grad": (
        ("step", "layer", "in_channel", "out_channel", "input_mean", "grad_mag"),
        _mean_grad_rows,
    ),
    "channel_grads": (("step", "layer", "channel", "value"), _channel_grad_rows),
}


# --- one sweep leg -----------------------------------------------------------


def run_leg(
    cfg: ExperimentConfig,
    lr: float,
    leg_index: int,
    train: LabeledImageSet,
    test: LabeledImageSet,
) -> LegResult:
    if cfg.batch_size > train.n:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds the training set ({train.n})"
        )
    root = SeededRng(cfg.seed)
    net = build_network(cfg.network, root.child(100 + 10 * leg_index))
    order_gen = root.child(101 + 10 * leg_index).generator()
    augment_gen = root.child(102 + 10 * leg_index).generator()

    state = SgdState(
        base_lr=lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        schedule=cfg.schedule,
    )
    monitor = DivergenceMonitor(net, threshold=cfg.divergence_threshold)
    tables = {name: (cols, []) for name, (cols, _) in _INSTRUMENT_TABLE.items()
              if name in dict(cfg.diagnostics)}

    def fire(name, batch, step):
        cols, rows = tables[name]
        rows.extend(_INSTRUMENT_TABLE[name][1](net, batch, step))

    b = cfg.batch_size
    init_batch = (train.images[:b], train.labels[:b])
    for name, _every in cfg.diagnostics:
        fire(name, init_batch, 0)

    steps_per_epoch = train.n // b
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    metrics: list = []
    event = None
    step = 0
    for epoch in range(cfg.epochs):
        order = order_gen.permutation(train.n)
        for k in range(steps_per_epoch):
            idx = order[k * b : (k + 1) * b]
            x = train.images[idx]
            if cfg.dataset.augment:
                x = augment_batch(x, augment_gen)
            batch = (x, train.labels[idx])

            fraction = step / total_steps
            lr_now = state.lr_at(fraction)
            pre_params = net.flat_params()
            pre_loss, _ = net.loss_and_grad(*batch)
            sgd_step(net.params(), state, fraction)
            post_loss = net.loss_only(*batch)
            step += 1
            metrics.append([step, epoch, lr_now, pre_loss, np.nan, np.nan])

            event = monitor.check(step, batch, pre_params, pre_loss, post_loss)
            if event is not None:
                break
            for name, every in cfg.diagnostics:
                if step % every == 0:
                    fire(name, batch, step)
        if event is not None:
            break
        if metrics:
            metrics[-1][4] = net.accuracy(train.images[:2048], train.labels[:2048])
            metrics[-1][5] = net.accuracy(test.images, test.labels)

    if event is not None:
        final_acc = float("nan")
    elif metrics and np.isfinite(metrics[-1][5]):
        final_acc = metrics[-1][5]
    elif cfg.epochs > 0 and metrics:
        final_acc = net.accuracy(test.images, test.labels)
    else:
        final_acc = float("nan")
    return LegResult(
        lr=lr,
        steps=step,
        metrics=metrics,
        tables=tables,
        diverged=event is not None,
        event=event,
        final_test_acc=final_acc,
    )


def run_experiment(cfg: ExperimentConfig) -> RunArtifact:
    cfg.validate()
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    train, test = load_dataset(cfg)
    lrs = cfg.lr_sweep if cfg.lr_sweep else (cfg.base_lr,)
    legs = [run_leg(cfg, lr, i, train, test) for i, lr in enumerate(lrs)]
    best = _best_leg(legs)
    return RunArtifact(
        config_echo=echo_config(cfg),
        legs=legs,
        best_index=best,
        started=started,
        finished=time.strftime("%Y-%m-%dT%H:%M:%S"),
        meta={"train_examples": train.n, "test_examples": test.n},
    )


def _best_leg(legs: list[LegResult]) -> int | None:
    """Highest final test accuracy among completed legs; ties go to the
    larger learning rate."""
    best = None
    for i, leg in enumerate(legs):
        if leg.diverged or not np.isfinite(leg.final_test_acc):
            continue
        if best is None:
            best = i
            continue
        champ = legs[best]
        if leg.final_test_acc > champ.final_test_acc or (
            leg.final_test_acc == champ.final_test_acc and leg.lr > champ.lr
        ):
            best = i
    return best


# --- artifact emission --------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    return str(value)


def write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _leg_dir_name(i: int, lr: float) -> str:
    return f"leg_{i}_lr{_fmt(lr)}"


def emit(artifact: RunArtifact, out_dir: str) -> list[str]:
    """Write every artifact file; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(path, writer):
        writer(path)
        written.append(path)

    put(os.path.join(out_dir, "config.txt"),
        lambda p: _write_text(p, artifact.config_echo))

    for i, leg in enumerate(artifact.legs):
        leg_dir = os.path.join(out_dir, _leg_dir_name(i, leg.lr))
        os.makedirs(leg_dir, exist_ok=True)
        put(os.path.join(leg_dir, "metrics.csv"),
            lambda p, leg=leg: write_csv(p, METRIC_COLUMNS, leg.metrics))
        for name, (cols, rows) in leg.tables.items():
            put(os.path.join(leg_dir, f"{name}.csv"),
                lambda p, cols=cols, rows=rows: write_csv(p, cols, rows))
        if leg.event is not None:
            ev = leg.event
            put(os.path.join(leg_dir, "divergence.json"),
                lambda p, ev=ev: _write_json(p, {
                    "step": ev.step,
                    "pre_loss": ev.pre_loss,
                    "post_loss": ev.post_loss,
                    "fractions": list(ev.fractions),
                }))
            rows = [
                (f, lm.label, lm.mean_abs_mean, lm.mean_variance)
                for f, prof in zip(ev.fractions, ev.profiles)
                for lm in prof.layers
            ]
            put(os.path.join(leg_dir, "divergence_moments.csv"),
                lambda p, rows=rows: write_csv(
                    p, ("fraction", "layer", "mean_abs_mean", "mean_variance"), rows))

    summary = {
        "started": artifact.started,
        "finished": artifact.finished,
        "meta": artifact.meta,
        "legs": [
            {
                "dir": _leg_dir_name(i, leg.lr),
                "lr": leg.lr,
                "steps": leg.steps,
                "diverged": leg.diverged,
                "final_test_acc": None
                if not np.isfinite(leg.final_test_acc)
                else leg.final_test_acc,
            }
            for i, leg in enumerate(artifact.legs)
        ],
        "best_leg": artifact.best_index,
        "best_lr": None
        if artifact.best_index is None
        else artifact.legs[artifact.best_index].lr,
    }
    put(os.path.join(out_dir, "summary.json"),
        lambda p: _write_json(p, summary))
    return written


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
