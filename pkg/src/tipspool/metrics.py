"""Shift-robustness metrics: consistency, fidelity, MSB, patch attacks.

Consistency asks whether two randomly shifted copies of an image receive
the same prediction; fidelity additionally requires that prediction to be
the ground-truth label, so fidelity <= consistency always. MSB aggregates
the per-layer window-max hit fraction over every pooling layer of a model.

`predict` arguments are callables mapping an image batch (n,c,h,w) to
integer class predictions; argmax ties inside a model resolve to the
lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pooling import measure_window_max_hits
from .rng import EVAL_SHIFTS, PATCHES, stream
from .shifts import apply_shift


class ZeroVarianceError(ValueError):
    """Correlation is undefined when one variable never varies."""


@dataclass(frozen=True)
class ShiftSampler:
    """Draws shift amounts dh ~ U(0, h*max_fraction), dw ~ U(0, w*max_fraction)."""

    seed: int = 0
    max_fraction: float = 0.125
    pairs_per_image: int = 5

    def __post_init__(self):
        if self.pairs_per_image < 1:
            raise ValueError("pairs_per_image must be >= 1")
        if not (0.0 < self.max_fraction <= 1.0):
            raise ValueError("max_fraction must lie in (0, 1]")

    def sample(self, n_images, h, w):
        """(n, K, 2, 2) integer shifts: per image, per pair, two (dh, dw)."""
        rng = stream(self.seed, EVAL_SHIFTS)
        k = self.pairs_per_image
        dh = np.rint(rng.uniform(0.0, h * self.max_fraction, size=(n_images, k, 2)))
        dw = np.rint(rng.uniform(0.0, w * self.max_fraction, size=(n_images, k, 2)))
        return np.stack([dh, dw], axis=-1).astype(np.int64)


@dataclass
class MsbReport:
    """Per-pooling-layer hit fractions and their mean; None when no pooling."""

    per_layer: list
    model_msb: float | None
    n_images: int

    @property
    def applicable(self):
        return self.model_msb is not None


@dataclass
class MetricsReport:
    accuracy: float
    std_consistency: float
    std_fidelity: float
    circ_consistency: float
    circ_fidelity: float
    msb: float | None
    msb_per_layer: list
    curves: dict  # mode -> list of (d, consistency, fidelity)
    patch_rows: list  # (patch_size, mode, consistency, fidelity)
    n_images: int
    pairs_per_image: int
    seed: int


def _shifted_predictions(predict, images, shifts, mode):
    """Predictions for the two shifted copies described by shifts (n,K,2,2)."""
    n, k = shifts.shape[:2]
    preds = np.empty((n, k, 2), dtype=np.int64)
    for side in range(2):
        batch = np.empty((n * k,) + images.shape[1:], dtype=images.dtype)
        pos = 0
        for i in range(n):
            for j in range(k):
                dh, dw = shifts[i, j, side]
                batch[pos] = apply_shift(images[i], mode, dh, dw)
                pos += 1
        preds[:, :, side] = predict(batch).reshape(n, k)
    return preds


def shift_agreement(predict, images, labels, sampler: ShiftSampler, mode):
    """(consistency, fidelity) over sampler.pairs_per_image pairs per image."""
    if len(images) == 0:
        raise ValueError("empty image set")
    h, w = images.shape[-2:]
    shifts = sampler.sample(len(images), h, w)
    preds = _shifted_predictions(predict, images, shifts, mode)
    agree = preds[:, :, 0] == preds[:, :, 1]
    consistency = float(agree.mean())
    if labels is None:
        return consistency, None
    labels = np.asarray(labels)
    if labels.shape[0] != len(images):
        raise ValueError(f"{len(images)} images but {labels.shape[0]} labels")
    correct = agree & (preds[:, :, 0] == labels[:, None])
    return consistency, float(correct.mean())


def consistency(predict, images, sampler: ShiftSampler, mode):
    """P(two shifted copies of the same image get the same prediction)."""
    cons, _ = shift_agreement(predict, images, None, sampler, mode)
    return cons


def fidelity(predict, images, labels, sampler: ShiftSampler, mode):
    """P(both shifted predictions equal the ground-truth label)."""
    if labels is None:
        raise ValueError("fidelity requires labels")
    _, fid = shift_agreement(predict, images, labels, sampler, mode)
    return fid


def accuracy(predict, images, labels):
    return float((predict(images) == np.asarray(labels)).mean())


def magnitude_curves(predict, images, labels, mode, max_shift):
    """Consistency/fidelity against the unshifted prediction at each exact
    diagonal shift d in {0..max_shift}."""
    base = predict(images)
    labels = np.asarray(labels)
    rows = []
    for d in range(max_shift + 1):
        shifted = np.stack([apply_shift(img, mode, d, d) for img in images])
        pred = predict(shifted)
        cons = float((pred == base).mean())
        fid = float(((pred == base) & (pred == labels)).mean())
        rows.append((d, cons, fid))
    return rows


def model_msb(model, images, batch_size=256, tol=1e-6):
    """Mean window-max hit fraction per pooling layer, averaged over layers.

    Models with no pooling layers (the GAP-only baseline) have no MSB; the
    report carries None and callers must treat it as not applicable.
    """
    records = None
    n = len(images)
    for start in range(0, n, batch_size):
        ios = model.pool_io(images[start:start + batch_size])
        if records is None:
            records = [[] for _ in ios]
        for li, (x_in, x_out, s) in enumerate(ios):
            records[li].append(measure_window_max_hits(x_in, x_out, s, tol=tol) * len(x_in))
    if records is None or len(records) == 0:
        return MsbReport(per_layer=[], model_msb=None, n_images=n)
    per_layer = [float(sum(chunks) / n) for chunks in records]
    return MsbReport(per_layer=per_layer, model_msb=float(np.mean(per_layer)), n_images=n)


def patch_erase(x, patch_size, seed):
    """Zero out one uniformly placed square patch; patch_size 0 is identity."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if patch_size < 0 or patch_size > min(h, w):
        raise ValueError(f"patch_size must lie in [0, {min(h, w)}], got {patch_size}")
    if patch_size == 0:
        return x.copy()
    rng = stream(seed, PATCHES)
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    out = x.copy()
    out[..., top:top + patch_size, left:left + patch_size] = 0
    return out


def patch_erase_batch(images, patch_size, seed):
    """Independent patch per image, derived deterministically from seed."""
    return np.stack(
        [patch_erase(img, patch_size, (seed + i) & 0xFFFFFFFF) for i, img in enumerate(images)]
    )


def patched_consistency(predict, images, labels, sampler: ShiftSampler, mode, patch_size):
    """Patch first, then run the usual shift-consistency protocol."""
    patched = patch_erase_batch(images, patch_size, sampler.seed)
    return shift_agreement(predict, patched, labels, sampler, mode)


def pearson_r(xs, ys):
    """Sample Pearson correlation; raises ZeroVarianceError when undefined."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"pearson_r needs two equal-length vectors, got {xs.shape} and {ys.shape}")
    if xs.size < 2:
        raise ValueError("pearson_r needs at least two points")
    xd = xs - xs.mean()
    yd = ys - ys.mean()
    sx = np.sqrt((xd * xd).sum())
    sy = np.sqrt((yd * yd).sum())
    if sx == 0.0 or sy == 0.0:
        raise ZeroVarianceError("correlation undefined: an input has zero variance")
    return float((xd * yd).sum() / (sx * sy))
