"""Command-line surface: gen-data, train, eval, msb, correlate, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import dataclasses
import itertools
import os
import sys

import click

from .data import DataError, gen_synthetic, write_idx
from .harness import (
    ConfigError,
    NumericError,
    RunConfig,
    ablate,
    build_datasets,
    config_digest,
    correlate,
    evaluate_model,
    load_model,
    parse_config,
    train_run,
)
from .harness.checkpoint import CheckpointError
from .harness.runs import summarize

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(config_path, seed, **overrides):
    try:
        if config_path:
            with open(config_path, "r", encoding="utf-8") as f:
                cfg = parse_config(f.read())
        else:
            cfg = RunConfig()
        updates = {k: v for k, v in overrides.items() if v is not None}
        if seed is not None:
            updates["seed"] = seed
        if updates:
            cfg = dataclasses.replace(cfg, **updates)
        return cfg.validate()
    except FileNotFoundError as exc:
        _fail(EXIT_CONFIG, f"config file not found: {exc.filename}")
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


shared_options = [
    click.option("--config", "config_path", type=click.Path(), default=None, help="Run config file (key = value lines)."),
    click.option("--seed", type=int, default=None, help="Experiment seed."),
    click.option("--out", "out_dir", type=click.Path(), default="runs/out", help="Output directory."),
]

train_eval_options = [
    click.option("--pool", type=click.Choice(["max", "avg", "blur", "aps", "tips", "gap"]), default=None),
    click.option("--lpf", type=click.Choice(["0", "3", "5"]), default=None),
    click.option("--epsilon", type=float, default=None),
    click.option("--alpha", type=float, default=None),
    click.option("--epochs", type=int, default=None),
    click.option("--lr", type=float, default=None),
    click.option("--momentum", type=float, default=None),
    click.option("--weight-decay", "weight_decay", type=float, default=None),
    click.option("--batch-size", "batch_size", type=int, default=None),
    click.option("--shift-mode", "shift_mode", type=click.Choice(["standard", "circular"]), default=None,
                 help="Restrict the eval summary to one shift mode."),
    click.option("--pairs-per-image", "pairs_per_image", type=int, default=None),
    click.option("--patch-size", "patch_size", type=int, default=None,
                 help="Evaluate patch-attack consistency at this patch size."),
]


def _apply(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn

    return wrap


def _overrides_from(pool, lpf, epsilon, alpha, epochs, lr, momentum, weight_decay,
                    batch_size, pairs_per_image, patch_size):
    ov = dict(
        pool=pool,
        lpf=int(lpf) if lpf is not None else None,
        epsilon=epsilon,
        alpha=alpha,
        epochs=epochs,
        lr=lr,
        momentum=momentum,
        weight_decay=weight_decay,
        batch_size=batch_size,
        pairs_per_image=pairs_per_image,
    )
    if patch_size is not None:
        ov["patch_sizes"] = (patch_size,)
    return ov


@click.group()
def main():
    """Shift-invariant pooling experiments."""


@main.command("gen-data")
@_apply(shared_options)
@click.option("--n-train", type=int, default=None)
@click.option("--n-test", type=int, default=None)
@click.option("--image-size", type=int, default=None)
def gen_data(config_path, seed, out_dir, n_train, n_test, image_size):
    """Generate the synthetic shapes dataset as IDX files."""
    cfg = _load_config(config_path, seed, n_train=n_train, n_test=n_test, image_size=image_size)
    try:
        train, test = gen_synthetic(cfg.synthetic_spec())
        os.makedirs(out_dir, exist_ok=True)
        write_idx(train, os.path.join(out_dir, "train-images.idx"), os.path.join(out_dir, "train-labels.idx"))
        write_idx(test, os.path.join(out_dir, "test-images.idx"), os.path.join(out_dir, "test-labels.idx"))
    except (DataError, OSError) as exc:
        _fail(EXIT_DATA, str(exc))
    click.echo(f"wrote {len(train)} train / {len(test)} test images to {out_dir}")


@main.command()
@_apply(shared_options)
@_apply(train_eval_options)
def train(config_path, seed, out_dir, shift_mode, **train_flags):
    """Train one model per the config and write checkpoint plus epoch log."""
    cfg = _load_config(config_path, seed, **_overrides_from(**train_flags))
    try:
        result = train_run(cfg, out_dir, verbose=True)
    except DataError as exc:
        _fail(EXIT_DATA, str(exc))
    except NumericError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    click.echo(f"checkpoint: {result.ckpt_path}")
    click.echo(f"train log:  {result.log_path}")


@main.command("eval")
@_apply(shared_options)
@_apply(train_eval_options)
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True, help="Checkpoint to evaluate.")
def eval_cmd(config_path, seed, out_dir, shift_mode, ckpt_path, **train_flags):
    """Evaluate a checkpoint: accuracy, consistency, fidelity, MSB, curves."""
    try:
        model, cfg, _ = load_model(ckpt_path)
    except (CheckpointError, FileNotFoundError) as exc:
        _fail(EXIT_DATA, str(exc))
    overrides = _overrides_from(**train_flags)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    for key in ("pool", "lpf", "epochs", "lr", "momentum", "weight_decay", "batch_size",
                "epsilon", "alpha"):
        overrides.pop(key, None)  # architecture/training knobs come from the checkpoint
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides).validate()
    try:
        _, test_ds = build_datasets(cfg)
    except DataError as exc:
        _fail(EXIT_DATA, str(exc))
    report = evaluate_model(model, test_ds, cfg, out_dir=out_dir)
    if shift_mode == "standard":
        click.echo(f"standard consistency {report.std_consistency:.4f} fidelity {report.std_fidelity:.4f}")
    elif shift_mode == "circular":
        click.echo(f"circular consistency {report.circ_consistency:.4f} fidelity {report.circ_fidelity:.4f}")
    click.echo(summarize(report))
    click.echo(f"reports written to {out_dir}")


@main.command()
@_apply(shared_options)
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True, help="Checkpoint to measure.")
def msb(config_path, seed, out_dir, ckpt_path):
    """Measure maximum-sampling bias of a checkpointed model."""
    try:
        model, cfg, _ = load_model(ckpt_path)
        _, test_ds = build_datasets(cfg)
    except (CheckpointError, DataError, FileNotFoundError) as exc:
        _fail(EXIT_DATA, str(exc))
    from .metrics import model_msb

    report = model_msb(model, test_ds.images)
    os.makedirs(out_dir, exist_ok=True)
    from .harness.runs import MSB_SCHEMA, _write_csv

    _write_csv(
        os.path.join(out_dir, "msb.csv"), MSB_SCHEMA, cfg,
        ["layer", "msb"],
        [[i, v] for i, v in enumerate(report.per_layer)] + [["model", report.model_msb]],
    )
    if report.applicable:
        click.echo(f"model MSB: {report.model_msb:.4f} over {len(report.per_layer)} pooling layers")
    else:
        click.echo("model MSB: not applicable (no pooling layers)")


@main.command()
@_apply(shared_options)
@click.option("--pools", default="max,avg,blur,aps,tips", help="Comma list of pooling kinds for the grid.")
@click.option("--layer-counts", default="1,2,3", help="Comma list of pooling-layer counts.")
@click.option("--epochs", type=int, default=None, help="Override epochs for every cell.")
def correlate_cmd(config_path, seed, out_dir, pools, layer_counts, epochs):
    """Train a pooling grid and correlate MSB with the invariance metrics."""
    base = _load_config(config_path, seed)
    grid = []
    try:
        for pool, layers in itertools.product(pools.split(","), (int(x) for x in layer_counts.split(","))):
            pool = pool.strip()
            channels = base.channels[: layers + 1]
            if len(channels) != layers + 1:
                raise ConfigError(
                    f"layer count {layers} needs {layers + 1} stages but channels={base.channels}"
                )
            cell = dataclasses.replace(
                base,
                pool=pool,
                channels=channels,
                lpf=3 if pool == "blur" else base.lpf if pool in ("aps", "tips") else 0,
            )
            if epochs is not None:
                cell = dataclasses.replace(cell, epochs=epochs)
            grid.append(cell.validate())
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        records, r_values = correlate(grid, out_dir, verbose=True)
    except DataError as exc:
        _fail(EXIT_DATA, str(exc))
    except NumericError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    for pair, r in sorted(r_values.items()):
        shown = "undefined (zero variance)" if r is None else f"{r:+.4f}"
        click.echo(f"pearson r (msb vs {pair}): {shown}")
    click.echo(f"{len(records)} cells written to {out_dir}")


@main.command("ablate")
@_apply(shared_options)
@click.option("--epochs", type=int, default=None)
def ablate_cmd(config_path, seed, out_dir, epochs):
    """Train the four regularizer arms (task-only, +FM, +undo, +both)."""
    cfg = _load_config(config_path, seed, epochs=epochs, pool="tips")
    try:
        results = ablate(cfg, out_dir, verbose=True)
    except DataError as exc:
        _fail(EXIT_DATA, str(exc))
    except NumericError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    click.echo(f"ablation table written to {os.path.join(out_dir, 'ablation.csv')}")
    click.echo(f"config digest: {config_digest(cfg)}")


if __name__ == "__main__":
    main()
