"""Training loop, evaluation, correlation grid, and the regularizer ablation."""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from ..autodiff import SgdState, backward, constant, mul, relu, sgd_step
from ..data import Dataset, batches, gen_synthetic, load_idx
from ..losses import (
    LossSchedule,
    loss_fm,
    loss_undo,
    sample_undo_shifts,
    total_loss,
    undo_targets,
)
from ..metrics import (
    MetricsReport,
    ZeroVarianceError,
    accuracy,
    magnitude_curves,
    model_msb,
    patched_consistency,
    pearson_r,
    shift_agreement,
)
from ..model import CnnClassifier
from ..nn import conv2d, cross_entropy
from ..rng import SPLIT, TRAIN_SHIFTS, stream
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_digest, parse_config, render_config

TRAIN_LOG_SCHEMA = "tipspool-train-v1"
EVAL_SCHEMA = "tipspool-eval-v1"
CURVES_SCHEMA = "tipspool-curves-v1"
MSB_SCHEMA = "tipspool-msb-v1"
PATCH_SCHEMA = "tipspool-patch-v1"
CORR_SCHEMA = "tipspool-correlation-v1"
CORR_SUMMARY_SCHEMA = "tipspool-correlation-summary-v1"
ABLATION_SCHEMA = "tipspool-ablation-v1"


class NumericError(Exception):
    """Loss became non-finite during training."""


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def _write_csv(path, schema, cfg, header, rows):
    digest = config_digest(cfg) if isinstance(cfg, RunConfig) else str(cfg)
    with open(path, "w", newline="") as f:
        f.write(f"# schema={schema} config={digest}\n")
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def build_datasets(cfg: RunConfig):
    """(train, test) datasets for a config."""
    if cfg.dataset == "synthetic":
        return gen_synthetic(cfg.synthetic_spec())
    train = load_idx(cfg.idx_train_images, cfg.idx_train_labels)
    test = load_idx(cfg.idx_test_images, cfg.idx_test_labels)
    n_cls = max(train.num_classes, test.num_classes, cfg.num_classes)
    train.num_classes = test.num_classes = n_cls
    return train, test


def _split_validation(train: Dataset, cfg: RunConfig):
    """Deterministic holdout split; validation never touches test data."""
    n = len(train)
    n_val = int(round(cfg.val_fraction * n))
    if n_val == 0:
        return train, None
    order = stream(cfg.seed, SPLIT).permutation(n)
    val_idx, tr_idx = order[:n_val], order[n_val:]
    sub = lambda idx, tag: Dataset(
        train.images[idx], train.labels[idx], train.num_classes, train.provenance + tag
    )
    return sub(tr_idx, " [train]"), sub(val_idx, " [val]")


def _undo_terms(result, model, cfg, shift_rng):
    """Per-layer undo losses plus the mean |psi(X) - X^t| gap.

    The undo gradient reaches only psi's own weights: the trunk input is
    re-fed as a constant, so the backbone and classifier stay driven by the
    task loss alone and the schedule switch cannot destabilize them.
    """
    nodes = []
    gaps = []
    for li, x_val in enumerate(result.psi_ins):
        n, _, h, w = x_val.shape
        shifts = sample_undo_shifts(shift_rng, n, h, w)
        shifted = undo_targets(x_val, shifts)
        psi = model.pools[li].psi
        if cfg.undo_target == "shifted":
            psi_out = relu(conv2d(constant(x_val), psi))
            node = loss_undo(psi_out, shifted)
            gaps.append(float(np.abs(psi_out.value - shifted).mean()))
        else:
            # alternative reading: psi must map the shifted input back to X
            psi_shift = relu(conv2d(constant(shifted), psi))
            node = loss_undo(psi_shift, x_val)
            gaps.append(float(np.abs(psi_shift.value - x_val).mean()))
        nodes.append(node)
    total = nodes[0]
    for extra in nodes[1:]:
        total = total + extra
    return mul(total, 1.0 / len(nodes)), float(np.mean(gaps))


@dataclass
class TrainResult:
    model: CnnClassifier
    rows: list
    best_epoch: int
    ckpt_path: str
    log_path: str


def train_run(cfg: RunConfig, out_dir, verbose=False):
    """Mini-batch SGD over cfg.epochs with the staged regularizer schedule.

    Early stopping watches validation accuracy with cfg.patience; for TIPS
    runs the best/patience state resets at the undo activation epoch so the
    second stage of the schedule always executes (the objective changes
    there, so a stage-1 plateau must not preempt stage 2).
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    train_full, test_ds = build_datasets(cfg)
    train_ds, val_ds = _split_validation(train_full, cfg)

    model_cfg = cfg.model_config()
    model = CnnClassifier.build(model_cfg, cfg.seed)

    is_tips = cfg.pool == "tips" and model_cfg.num_pooling_layers > 0
    fm_on = is_tips and cfg.use_fm
    undo_enabled = is_tips and cfg.use_undo
    if not is_tips and (cfg.use_fm or cfg.use_undo) and cfg.alpha > 0:
        warnings.warn(
            f"pooling kind {cfg.pool!r} has no mixing branch; undo/FM terms are skipped",
            stacklevel=2,
        )
    sched = cfg.schedule()
    # when undo is disabled the combining schedule simply never switches
    combine_sched = sched if undo_enabled else LossSchedule(cfg.alpha, 1.0, cfg.epochs)
    strides = [model_cfg.pool_stride] * model_cfg.num_pooling_layers
    shift_rng = stream(cfg.seed, TRAIN_SHIFTS)

    # with a separate mixing head, psi receives gradients only from the undo
    # term, so it gets its own optimizer stepped only in undo epochs
    named = model.named_parameters()
    psi_only = sorted(n for n in named if ".psi." in n) if (is_tips and not cfg.psi_shared) else []
    main_params = [named[n] for n in sorted(named) if n not in psi_only]
    opt = SgdState(main_params, cfg.lr, cfg.momentum, cfg.weight_decay)
    opt_psi = None
    if psi_only and undo_enabled:
        opt_psi = SgdState([named[n] for n in psi_only], cfg.lr, cfg.momentum, cfg.weight_decay)

    best_state = model.state_dict()
    best_epoch = 0
    best_acc = -1.0
    patience_left = cfg.patience
    rows = []

    for epoch in range(cfg.epochs):
        undo_on = undo_enabled and sched.undo_active(epoch)
        if undo_enabled and epoch == sched.switch_epoch:
            best_acc = -1.0
            patience_left = cfg.patience
        sums = {"l_task": 0.0, "l_fm": 0.0, "l_undo": 0.0, "gap": 0.0, "total": 0.0}
        counts = {"l_fm": 0, "l_undo": 0}
        seen = 0
        hits = 0
        steps = 0
        for images, labels in batches(train_ds, cfg.batch_size, seed=cfg.seed, shuffle=True, salt=epoch):
            result = model.forward(images)
            l_task = cross_entropy(result.logits, labels)
            l_fm_node = loss_fm(result.taus, strides) if fm_on else None
            l_undo_node = None
            if undo_on:
                l_undo_node, gap = _undo_terms(result, model, cfg, shift_rng)
                sums["gap"] += gap
                counts["l_undo"] += 1
            report = total_loss(l_task, l_fm_node, l_undo_node, combine_sched, epoch)
            if not math.isfinite(report.total):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {steps}")
            backward(report.total_node)
            sgd_step(opt)
            if opt_psi is not None and undo_on:
                sgd_step(opt_psi)
            sums["l_task"] += report.l_task
            sums["total"] += report.total
            if report.l_fm is not None:
                sums["l_fm"] += report.l_fm
                counts["l_fm"] += 1
            if report.l_undo is not None:
                sums["l_undo"] += report.l_undo
            pred = np.argmax(result.logits.value, axis=1)
            hits += int((pred == labels).sum())
            seen += len(labels)
            steps += 1
        train_acc = hits / max(seen, 1)
        if val_ds is not None:
            val_acc = accuracy(model.predict, val_ds.images, val_ds.labels)
        else:
            val_acc = train_acc
        rows.append(
            {
                "epoch": epoch,
                "l_task": sums["l_task"] / max(steps, 1),
                "l_fm": (sums["l_fm"] / counts["l_fm"]) if counts["l_fm"] else None,
                "l_undo": (sums["l_undo"] / counts["l_undo"]) if counts["l_undo"] else None,
                "undo_gap": (sums["gap"] / counts["l_undo"]) if counts["l_undo"] else None,
                "total": sums["total"] / max(steps, 1),
                "train_acc": train_acc,
                "val_acc": val_acc,
            }
        )
        if verbose:
            print(f"epoch {epoch}: total={rows[-1]['total']:.4f} val_acc={val_acc:.4f}")
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = model.state_dict()
            patience_left = cfg.patience
        else:
            patience_left -= 1
            if cfg.patience > 0 and patience_left <= 0:
                break

    model.load_state(best_state)
    digest = config_digest(cfg)
    log_path = os.path.join(out_dir, "train_log.csv")
    header = ["epoch", "l_task", "l_fm", "l_undo", "undo_gap", "total", "train_acc", "val_acc"]
    _write_csv(log_path, TRAIN_LOG_SCHEMA, cfg, header, [[r[h] for h in header] for r in rows])
    ckpt_path = os.path.join(out_dir, f"{digest}.ckpt")
    save_checkpoint(ckpt_path, model.state_dict(), render_config(cfg), best_epoch)
    return TrainResult(model=model, rows=rows, best_epoch=best_epoch, ckpt_path=ckpt_path, log_path=log_path)


def load_model(ckpt_path):
    """Rebuild the model a checkpoint describes and load its tensors."""
    ckpt = load_checkpoint(ckpt_path)
    cfg = parse_config(ckpt.config_text)
    model = CnnClassifier.build(cfg.model_config(), cfg.seed)
    model.load_state(ckpt.tensors)
    return model, cfg, ckpt


def evaluate_model(model, test_ds, cfg: RunConfig, out_dir=None, include_curves=True):
    """Accuracy, shift consistency/fidelity (both modes), curves, MSB, patches."""
    sampler = cfg.sampler()
    images, labels = test_ds.images, test_ds.labels
    acc = accuracy(model.predict, images, labels)
    std_cons, std_fid = shift_agreement(model.predict, images, labels, sampler, "standard")
    circ_cons, circ_fid = shift_agreement(model.predict, images, labels, sampler, "circular")
    msb = model_msb(model, images)
    curves = {}
    if include_curves:
        d_max = images.shape[-2] // 8
        for mode in ("standard", "circular"):
            curves[mode] = magnitude_curves(model.predict, images, labels, mode, d_max)
    patch_rows = []
    for size in cfg.patch_sizes:
        for mode in ("standard", "circular"):
            cons, fid = patched_consistency(model.predict, images, labels, sampler, mode, size)
            patch_rows.append((size, mode, cons, fid))
    report = MetricsReport(
        accuracy=acc,
        std_consistency=std_cons,
        std_fidelity=std_fid,
        circ_consistency=circ_cons,
        circ_fidelity=circ_fid,
        msb=msb.model_msb,
        msb_per_layer=msb.per_layer,
        curves=curves,
        patch_rows=patch_rows,
        n_images=len(images),
        pairs_per_image=sampler.pairs_per_image,
        seed=cfg.seed,
    )
    if out_dir is not None:
        write_eval_reports(report, cfg, out_dir)
    return report


def write_eval_reports(report: MetricsReport, cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(
        os.path.join(out_dir, "eval.csv"),
        EVAL_SCHEMA,
        cfg,
        [
            "accuracy", "std_consistency", "std_fidelity", "circ_consistency",
            "circ_fidelity", "msb", "n_images", "pairs_per_image", "seed",
        ],
        [[
            report.accuracy, report.std_consistency, report.std_fidelity,
            report.circ_consistency, report.circ_fidelity, report.msb,
            report.n_images, report.pairs_per_image, report.seed,
        ]],
    )
    _write_csv(
        os.path.join(out_dir, "msb.csv"),
        MSB_SCHEMA,
        cfg,
        ["layer", "msb"],
        [[i, v] for i, v in enumerate(report.msb_per_layer)]
        + [["model", report.msb]],
    )
    if report.curves:
        rows = []
        for mode, curve in sorted(report.curves.items()):
            rows.extend([[mode, d, c, f] for d, c, f in curve])
        _write_csv(
            os.path.join(out_dir, "eval_curves.csv"),
            CURVES_SCHEMA,
            cfg,
            ["mode", "d", "consistency", "fidelity"],
            rows,
        )
    if report.patch_rows:
        _write_csv(
            os.path.join(out_dir, "eval_patch.csv"),
            PATCH_SCHEMA,
            cfg,
            ["patch_size", "mode", "consistency", "fidelity"],
            report.patch_rows,
        )


def summarize(report: MetricsReport):
    lines = [
        f"accuracy            {report.accuracy:.4f}",
        f"std consistency     {report.std_consistency:.4f}",
        f"std fidelity        {report.std_fidelity:.4f}",
        f"circular consistency {report.circ_consistency:.4f}",
        f"circular fidelity   {report.circ_fidelity:.4f}",
        f"msb                 {'n/a' if report.msb is None else f'{report.msb:.4f}'}",
        f"(n={report.n_images}, K={report.pairs_per_image}, seed={report.seed})",
    ]
    return "\n".join(lines)


@dataclass
class CorrelationRecord:
    digest: str
    pool: str
    lpf: int
    num_pooling_layers: int
    seed: int
    accuracy: float
    std_consistency: float
    std_fidelity: float
    circ_consistency: float
    circ_fidelity: float
    msb: float | None


def correlate(configs, out_dir, verbose=False):
    """Train/evaluate every grid cell, then correlate MSB against invariance.

    Returns (records, r_values) where r_values maps metric name to Pearson r
    against MSB over the cells where MSB applies (GAP-only cells are kept in
    the table but excluded from the correlation).
    """
    if len(configs) < 2:
        raise ValueError("correlate needs at least two configurations")
    records = []
    for cfg in configs:
        cfg.validate()
        digest = config_digest(cfg)
        cell_dir = os.path.join(out_dir, "cells", digest)
        ckpt_path = os.path.join(cell_dir, f"{digest}.ckpt")
        if os.path.exists(ckpt_path):
            model, cfg_loaded, _ = load_model(ckpt_path)
            cfg = cfg_loaded
        else:
            model = train_run(cfg, cell_dir).model
        _, test_ds = build_datasets(cfg)
        report = evaluate_model(model, test_ds, cfg, out_dir=None, include_curves=False)
        records.append(
            CorrelationRecord(
                digest=digest,
                pool=cfg.pool,
                lpf=cfg.lpf,
                num_pooling_layers=cfg.model_config().num_pooling_layers,
                seed=cfg.seed,
                accuracy=report.accuracy,
                std_consistency=report.std_consistency,
                std_fidelity=report.std_fidelity,
                circ_consistency=report.circ_consistency,
                circ_fidelity=report.circ_fidelity,
                msb=report.msb,
            )
        )
        if verbose:
            print(f"cell {digest} ({cfg.pool}, layers={records[-1].num_pooling_layers}): "
                  f"msb={report.msb} std_cons={report.std_consistency:.4f}")
    records.sort(key=lambda r: r.digest)
    with_msb = [r for r in records if r.msb is not None]
    xs = [r.msb for r in with_msb]
    if len(with_msb) >= 2 and float(np.var(xs)) == 0.0:
        raise ZeroVarianceError("correlation undefined: MSB has zero variance over the grid")
    r_values = {}
    for metric in ("std_consistency", "circ_consistency", "accuracy"):
        ys = [getattr(r, metric) for r in with_msb]
        try:
            r_values[metric] = pearson_r(xs, ys)
        except ZeroVarianceError:
            r_values[metric] = None  # undefined for this pair only

    os.makedirs(out_dir, exist_ok=True)
    header = [
        "digest", "pool", "lpf", "num_pooling_layers", "seed", "accuracy",
        "std_consistency", "std_fidelity", "circ_consistency", "circ_fidelity", "msb",
    ]
    _write_csv(
        os.path.join(out_dir, "correlation.csv"),
        CORR_SCHEMA,
        f"grid-{len(records)}",
        header,
        [[getattr(r, h) for h in header] for r in records],
    )
    _write_csv(
        os.path.join(out_dir, "correlation_summary.csv"),
        CORR_SUMMARY_SCHEMA,
        f"grid-{len(records)}",
        ["pair", "pearson_r", "n"],
        [[f"msb_vs_{k}", v, len(with_msb)] for k, v in sorted(r_values.items())],
    )
    return records, r_values


ABLATION_ARMS = (
    ("task_only", False, False),
    ("fm", True, False),
    ("undo", False, True),
    ("both", True, True),
)


def ablate(base_cfg: RunConfig, out_dir, verbose=False):
    """Four-arm regularizer ablation sharing seed, init, and data."""
    if base_cfg.pool != "tips":
        raise ValueError("the regularizer ablation requires a TIPS model")
    rows = []
    results = {}
    for arm, use_fm, use_undo in ABLATION_ARMS:
        cfg = replace(base_cfg, use_fm=use_fm, use_undo=use_undo)
        arm_dir = os.path.join(out_dir, f"arm_{arm}")
        result = train_run(cfg, arm_dir, verbose=verbose)
        _, test_ds = build_datasets(cfg)
        report = evaluate_model(result.model, test_ds, cfg, out_dir=None, include_curves=False)
        results[arm] = (result, report)
        rows.append([
            arm, report.accuracy, report.std_consistency, report.std_fidelity,
            report.circ_consistency, report.circ_fidelity, report.msb,
        ])
        if verbose:
            print(f"arm {arm}: acc={report.accuracy:.4f} std_cons={report.std_consistency:.4f} "
                  f"msb={report.msb}")
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(
        os.path.join(out_dir, "ablation.csv"),
        ABLATION_SCHEMA,
        base_cfg,
        ["arm", "accuracy", "std_consistency", "std_fidelity",
         "circ_consistency", "circ_fidelity", "msb"],
        rows,
    )
    return results
