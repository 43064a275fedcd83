"""Synthetic translatable-shapes dataset and IDX binary ingestion.

The synthetic task places one anti-aliased shape (square, cross, disk or
ring) at a uniformly random position; the label is the shape type, so a
translation-invariant model can solve it by construction. Images are
single-channel floats in [0, 1].
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .rng import BATCH, DATA, stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SHAPE_NAMES = ("square", "cross", "disk", "ring")


class DataError(Exception):
    """Base for dataset ingestion failures."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    provenance: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IdxCountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DataError("label out of range for num_classes")

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 1
    n_train: int = 4000
    n_test: int = 1000
    image_size: int = 32
    num_classes: int = 4
    scale_min: float = 2.5
    scale_max: float = 5.0
    margin: int = 1
    noise: float = 0.05  # uniform background clutter
    salt: float = 0.03  # fraction of pixels hit by bright impulses

    def __post_init__(self):
        if self.num_classes < 1 or self.num_classes > len(SHAPE_NAMES):
            raise ValueError(f"num_classes must lie in [1, {len(SHAPE_NAMES)}]")
        if self.scale_min > self.scale_max or self.scale_min <= 0:
            raise ValueError("need 0 < scale_min <= scale_max")
        reach = self.scale_max + self.margin
        if 2 * reach >= self.image_size:
            raise ValueError(
                f"largest shape (radius {self.scale_max} + margin {self.margin}) "
                f"does not fit a {self.image_size}px image"
            )


def _shape_coverage(kind, size, cy, cx, r):
    """Anti-aliased coverage in [0,1] from a signed distance field."""
    ys = np.arange(size, dtype=np.float64)[:, None] - cy
    xs = np.arange(size, dtype=np.float64)[None, :] - cx
    t = r / 3.0
    if kind == "square":
        sdf = np.maximum(np.abs(ys), np.abs(xs)) - r
    elif kind == "cross":
        bar_v = np.maximum(np.abs(ys) - r, np.abs(xs) - t)
        bar_h = np.maximum(np.abs(ys) - t, np.abs(xs) - r)
        sdf = np.minimum(bar_v, bar_h)
    elif kind == "disk":
        sdf = np.sqrt(ys * ys + xs * xs) - r
    elif kind == "ring":
        sdf = np.abs(np.sqrt(ys * ys + xs * xs) - r) - t
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return np.clip(0.5 - sdf, 0.0, 1.0)


def _render_split(rng, n, spec):
    size = spec.image_size
    images = np.empty((n, 1, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % spec.num_classes  # round-robin keeps the histogram balanced
        r = rng.uniform(spec.scale_min, spec.scale_max)
        lo = spec.margin + r
        hi = size - 1 - spec.margin - r
        cy = rng.uniform(lo, hi)
        cx = rng.uniform(lo, hi)
        gain = rng.uniform(0.6, 1.0)
        img = gain * _shape_coverage(SHAPE_NAMES[cls], size, cy, cx, r)
        if spec.noise > 0:
            img = img + spec.noise * rng.random((size, size))
        if spec.salt > 0:
            # sparse bright impulses: high-frequency clutter that max-style
            # sampling propagates but window averaging suppresses
            hits = rng.random((size, size)) < spec.salt
            img = np.where(hits, rng.uniform(0.5, 1.0, (size, size)), img)
        images[i, 0] = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels[i] = cls
    return images, labels


def gen_synthetic(spec: SyntheticSpec):
    """Deterministic (train, test) datasets for the spec."""
    rng = stream(spec.seed, DATA)
    train_images, train_labels = _render_split(rng, spec.n_train, spec)
    test_images, test_labels = _render_split(rng, spec.n_test, spec)
    prov = f"synthetic(seed={spec.seed}, size={spec.image_size})"
    train = Dataset(train_images, train_labels, spec.num_classes, prov + " train")
    test = Dataset(test_images, test_labels, spec.num_classes, prov + " test")
    return train, test


# -- IDX binary format -----------------------------------------------------

def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise IdxTruncatedError(f"{what}: wanted {count} bytes, file ended after {len(data)}")
    return data


def load_idx(images_path, labels_path):
    """Read an IDX u8 image file plus its label file into a Dataset."""
    with open(images_path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, "image magic"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        n, h, w = struct.unpack(">III", _read_exact(f, 12, "image dims"))
        payload = _read_exact(f, n * h * w, "image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, "label magic"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        n_labels, = struct.unpack(">I", _read_exact(f, 4, "label count"))
        labels = np.frombuffer(_read_exact(f, n_labels, "label payload"), dtype=np.uint8)
    if n_labels != n:
        raise IdxCountMismatchError(f"{n} images but {n_labels} labels")
    digest = hashlib.sha256(payload).hexdigest()[:16]
    return Dataset(
        images=(images.astype(np.float32) / 255.0),
        labels=labels.astype(np.int64),
        num_classes=int(labels.max()) + 1 if n else 0,
        provenance=f"idx({images_path}, sha256:{digest})",
    )


def write_idx(dataset: Dataset, images_path, labels_path):
    """Quantize to u8 and write the IDX pair (test fixtures and gen-data)."""
    n, _, h, w = dataset.images.shape
    pixels = np.clip(np.rint(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def batches(dataset: Dataset, batch_size, seed=0, shuffle=True, salt=0):
    """Yield (images, labels) batches; the final partial batch is included."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n)
    if shuffle:
        order = stream(seed, BATCH, salt=salt).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
