"""Labeled image datasets: container, IDX/CSV ingestion, synthetic generator."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, LengthError

IDX_UBYTE = 0x08


@dataclass
class LabeledDataset:
    """Images in (N, C, H, W) float32 layout with pixel values in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    classes: int
    poisoned: np.ndarray = None
    orig_labels: np.ndarray = None
    trigger_names: np.ndarray = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.images.shape[0] != n:
            raise ConsistencyError(f"{self.images.shape[0]} images but {n} labels")
        if n and (self.labels.max() >= self.classes or self.labels.min() < 0):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if self.poisoned is None:
            self.poisoned = np.zeros(n, dtype=bool)
        if self.orig_labels is None:
            self.orig_labels = self.labels.copy()
        if self.trigger_names is None:
            self.trigger_names = np.full(n, "", dtype=object)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.classes,
                              self.poisoned[idx].copy(), self.orig_labels[idx].copy(),
                              self.trigger_names[idx].copy())

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.classes)


def split_per_class(data: LabeledDataset, first_per_class: int):
    """Split into (first ``first_per_class`` of each class, remainder), order preserved."""
    head = []
    for k in range(data.classes):
        head.extend(np.flatnonzero(data.labels == k)[:first_per_class].tolist())
    head = np.sort(np.asarray(head, dtype=np.int64))
    tail = np.setdiff1d(np.arange(len(data)), head)
    return data.subset(head), data.subset(tail)


# ---------------------------------------------------------------------- IDX

def _parse_idx(buf: bytes, what: str):
    if len(buf) < 4:
        raise LengthError(f"{what}: file too short for an IDX header", offset=len(buf))
    for off in (0, 1):
        if buf[off] != 0:
            raise FormatError(f"{what}: bad IDX magic byte 0x{buf[off]:02x}", offset=off)
    if buf[2] != IDX_UBYTE:
        raise FormatError(f"{what}: unsupported IDX type code 0x{buf[2]:02x}", offset=2)
    ndim = buf[3]
    if ndim == 0:
        raise FormatError(f"{what}: IDX with zero dimensions", offset=3)
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise LengthError(f"{what}: truncated IDX dimension table", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - head < count:
        raise LengthError(
            f"{what}: payload has {len(buf) - head} bytes, header promises {count}", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, classes=None) -> LabeledDataset:
    """Read an IDX image file and its IDX label file."""
    images = _parse_idx(Path(images_path).read_bytes(), "images")
    labels = _parse_idx(Path(labels_path).read_bytes(), "labels")
    if labels.ndim != 1:
        raise ConsistencyError(f"label file must be 1-D, got {labels.ndim} dimensions")
    if labels.shape[0] != images.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim == 4:
        images = images.transpose(0, 3, 1, 2)
    else:
        raise ConsistencyError(f"image file must be 3-D or 4-D, got {images.ndim} dimensions")
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 2
    return LabeledDataset(images.astype(np.float32) / 255.0, labels.astype(np.int64), max(classes, 2))


def encode_idx(array) -> bytes:
    arr = np.asarray(array, dtype=np.uint8)
    return bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def save_idx(path, array):
    Path(path).write_bytes(encode_idx(array))


def load_csv(path, image_shape, classes=None) -> LabeledDataset:
    """Rows of ``label,p0,p1,...``; pixels above 1 are taken as 0-255 bytes."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip().lstrip("-").isdigit():
                continue
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    pixels = np.asarray(rows, dtype=np.float32)
    expected = int(np.prod(image_shape))
    if pixels.ndim != 2 or pixels.shape[1] != expected:
        raise ConsistencyError(f"CSV rows carry {pixels.shape[-1]} pixels, shape needs {expected}")
    if pixels.size and pixels.max() > 1.0:
        pixels = pixels / 255.0
    labels = np.asarray(labels, dtype=np.int64)
    if classes is None:
        classes = int(labels.max()) + 1
    return LabeledDataset(pixels.reshape((-1, *image_shape)), labels, classes)


# ---------------------------------------------------------------- synthetic

MIN_RENDER = 16


def _class_prototypes(rng, classes, out_size, channels, min_dist):
    # blob geometry needs ~16 px; smaller images are rendered larger and block-averaged
    factor = -(-MIN_RENDER // out_size) if out_size < MIN_RENDER else 1
    size = out_size * factor
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = []
    tries = 0
    while len(protos) < classes:
        tries += 1
        img = np.zeros((size, size))
        for _ in range(2):
            r = rng.uniform(2.5, size - 5.0)
            c = rng.uniform(2.0, size / 2 - 1.0)
            s = rng.uniform(1.2, 2.0)
            for cc in (c, size - 1 - c):
                img += np.exp(-((yy - r) ** 2 + (xx - cc) ** 2) / (2 * s * s))
        img = 0.85 * img / img.max()
        if all(np.linalg.norm(img - p) >= min_dist for p in protos) or tries > 10000:
            protos.append(img)
    if factor > 1:
        protos = [p.reshape(out_size, factor, out_size, factor).mean(axis=(1, 3)) for p in protos]
    tint = rng.uniform(0.6, 1.0, size=(classes, channels))
    return np.stack([p[None] * tint[k][:, None, None] for k, p in enumerate(protos)])


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def generate_synthetic(classes=10, per_class=100, image_size=16, seed=0, channels=1,
                       noise=0.08) -> LabeledDataset:
    """Class-conditional Gaussian-blob images.

    Every class owns a left/right mirror-symmetric pair of blobs, so horizontal
    flips preserve class identity. Samples jitter the prototype by up to one
    pixel, rescale its brightness and add pixel noise.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    protos = _class_prototypes(rng, classes, image_size, channels, min_dist=2.5)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    for i, k in enumerate(labels):
        dy, dx = rng.integers(-1, 2, size=2)
        img = _shift(protos[k], int(dy), int(dx)) * rng.uniform(0.75, 1.15)
        img = img + 0.05 + noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    return LabeledDataset(images[order], labels[order], classes)


def augment(images, rng, pad=2):
    """Random horizontal flip plus random crop after zero padding."""
    n, _, h, w = images.shape
    out = images.copy()
    flip = rng.random(n) < 0.5
    out[flip] = out[flip][..., ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(offs):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out
