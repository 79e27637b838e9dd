"""Dataset loaders, deterministic subsetting, resizing, synthetic data.

Two binary formats are supported: IDX (big-endian, magic 2051 for images and
2049 for labels) and the 3073-byte-record CIFAR-10 layout.  Pixel bytes are
scaled by 1/255, so loads are lossless up to that factor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .tensor import DTYPE, Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images ``[N, C, H, W]`` in [0, 1] with integer labels in range."""

    images: Tensor
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self) -> None:
        images = np.ascontiguousarray(self.images, dtype=DTYPE)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[0] < 1:
            raise DataFormatError(f"images must be [N,C,H,W] with N >= 1, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DataFormatError(
                f"{labels.shape[0] if labels.ndim == 1 else labels.shape} labels "
                f"for {images.shape[0]} images"
            )
        if not np.all(np.isfinite(images)):
            raise DataFormatError("image values must be finite")
        if images.min() < 0.0 or images.max() > 1.0:
            raise DataFormatError("image values must lie in [0, 1]")
        if self.num_classes < 1:
            raise DataFormatError(f"num_classes must be >= 1, got {self.num_classes}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DataFormatError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        self.images = images
        self.labels = labels

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise DataFormatError(f"truncated file: expected {count} bytes of {what}")
    return data


def load_idx(images_path, labels_path, num_classes: int | None = None,
             name: str = "idx") -> LabeledDataset:
    """Load an IDX image/label file pair (the MNIST container format)."""
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">iiii", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        pixels = np.frombuffer(_read_exact(f, n * h * w, "pixels"), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">ii", _read_exact(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(f, n_labels, "labels"), dtype=np.uint8)
    if n != n_labels:
        raise DataFormatError(f"{n} images but {n_labels} labels")
    images = (pixels.reshape(n, 1, h, w).astype(DTYPE)) / DTYPE(255.0)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return LabeledDataset(images, labels.astype(np.int64), num_classes, name)


def load_cifar10_binary(batch_paths: Sequence, name: str = "cifar10") -> LabeledDataset:
    """Load CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    if not batch_paths:
        raise DataFormatError("no batch files given")
    all_images, all_labels = [], []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        all_labels.append(records[:, 0].astype(np.int64))
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(all_images).astype(DTYPE) / DTYPE(255.0)
    labels = np.concatenate(all_labels)
    return LabeledDataset(images, labels, 10, name)


def subset(data: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Per-class stratified sample of ceil(fraction * N_class) items.

    Deterministic in the seed; class balance is preserved to within the
    ceiling.  fraction 1.0 keeps every item (order reshuffled).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    gen = rng.stream(seed, "subset")
    picked = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no items to sample from")
        k = int(np.ceil(fraction * idx.size))
        picked.append(gen.permutation(idx)[:k])
    order = gen.permutation(np.concatenate(picked))
    return LabeledDataset(
        data.images[order], data.labels[order], data.num_classes,
        f"{data.name}[{fraction:g}]",
    )


def _bilinear_resize(images: np.ndarray, side: int) -> np.ndarray:
    n, c, h, w = images.shape
    # half-pixel centers (align_corners=False convention)
    ys = (np.arange(side) + 0.5) * h / side - 0.5
    xs = (np.arange(side) + 0.5) * w / side - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    img = images.astype(np.float64)
    top = img[:, :, y0][:, :, :, x0] * (1 - wx) + img[:, :, y0][:, :, :, x1] * wx
    bot = img[:, :, y1][:, :, :, x0] * (1 - wx) + img[:, :, y1][:, :, :, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(DTYPE)


def resize_to(data: LabeledDataset, side: int) -> LabeledDataset:
    """Resize every image to side x side.

    Integer downscale ratios use exact block averaging; anything else falls
    back to bilinear interpolation.  Values stay within [0, 1].
    """
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    n, c, h, w = data.images.shape
    if h == side and w == side:
        resized = data.images.copy()
    elif h % side == 0 and w % side == 0:
        bh, bw = h // side, w // side
        resized = (
            data.images.reshape(n, c, side, bh, side, bw)
            .mean(axis=(3, 5), dtype=np.float64)
            .astype(DTYPE)
        )
    else:
        resized = _bilinear_resize(data.images, side)
    resized = np.clip(resized, 0.0, 1.0)
    return LabeledDataset(resized, data.labels.copy(), data.num_classes,
                          f"{data.name}@{side}")


def synth_blobs(
    num_classes: int,
    per_class: int,
    image_shape: tuple[int, int, int] = (1, 16, 16),
    seed: int = 0,
    noise: float = 0.03,
) -> LabeledDataset:
    """Class-conditional Gaussian-blob images, linearly separable at high SNR.

    Each class owns a fixed blob center on a ring around the image center;
    images add per-image amplitude jitter and pixel noise, then clip to [0, 1].
    """
    if num_classes < 1 or per_class < 1:
        raise ValueError("num_classes and per_class must be positive")
    c, h, w = image_shape
    if c < 1 or h < 4 or w < 4:
        raise ValueError(f"image shape too small: {image_shape}")
    gen = rng.stream(seed, "blobs")
    yy, xx = np.mgrid[0:h, 0:w]
    radius = min(h, w) / 4.0
    sigma = min(h, w) / 8.0
    templates = []
    for k in range(num_classes):
        ang = 2.0 * np.pi * k / num_classes
        cy = h / 2.0 + radius * np.sin(ang)
        cx = w / 2.0 + radius * np.cos(ang)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        templates.append(bump)

    n = num_classes * per_class
    images = np.empty((n, c, h, w), dtype=DTYPE)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for i, label in enumerate(labels):
        amp = gen.uniform(0.7, 0.9)
        img = amp * templates[label] + gen.normal(0.0, noise, size=(h, w))
        images[i] = np.clip(img, 0.0, 1.0)[None, :, :]
    order = gen.permutation(n)
    return LabeledDataset(images[order], labels[order], num_classes,
                          f"blobs{num_classes}x{per_class}")
