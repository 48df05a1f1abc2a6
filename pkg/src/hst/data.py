"""Synthetic shape dataset and the binary dataset-file format.

Each class is a fixed geometric glyph (same draw color for every class so
nothing can be solved from color statistics alone) rendered onto a noisy
background at a jittered position and scale. Same spec + seed regenerates
the dataset byte for byte.

File layout (little-endian):
    magic "HSTD" | u32 version | u32 count | u32 channels | u32 height |
    u32 width | u32 label_width. Payload: count*C*H*W float32 images in
    [0,1], then count int32 labels (label_width bytes each).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataFormatError

MAGIC = b"HSTD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

BACKGROUND = 0.25
FOREGROUND = 0.95
NUM_SHAPE_KINDS = 10


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 100
    image_size: int = 32
    noise_std: float = 0.12
    seed: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")


@dataclass
class Dataset:
    images: np.ndarray  # [count, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [count] int32

    @property
    def count(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def _shape_mask(kind: int, size: int, cx: float, cy: float, scale: float) -> np.ndarray:
    """Boolean glyph mask. Stroke widths are chosen so the kinds cover a
    similar pixel area, which keeps mean-intensity statistics uninformative.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    r = size * 0.16 * scale
    w = max(size * 0.045 * scale, 1.0)
    e = r * 1.25
    kind = kind % NUM_SHAPE_KINDS
    if kind == 0:  # disc
        return dx * dx + dy * dy <= r * r
    if kind == 1:  # ring
        d2 = dx * dx + dy * dy
        return (d2 <= (r + w) ** 2) & (d2 >= (r - w) ** 2)
    if kind == 2:  # filled square
        return (np.abs(dx) <= r * 0.9) & (np.abs(dy) <= r * 0.9)
    if kind == 3:  # square outline
        inf = np.maximum(np.abs(dx), np.abs(dy))
        return (inf <= r * 1.1) & (inf >= r * 1.1 - 2 * w)
    if kind == 4:  # plus
        return ((np.abs(dx) <= w) & (np.abs(dy) <= e)) | ((np.abs(dy) <= w) & (np.abs(dx) <= e))
    if kind == 5:  # diagonal cross
        box = (np.abs(dx) <= e) & (np.abs(dy) <= e)
        return box & (
            (np.abs(dx - dy) <= w * np.sqrt(2)) | (np.abs(dx + dy) <= w * np.sqrt(2))
        )
    if kind == 6:  # filled triangle, apex up
        t = (dy + e) / (2 * e)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * e)
    if kind == 7:  # diamond
        return np.abs(dx) + np.abs(dy) <= r * 1.2
    if kind == 8:  # two horizontal bars
        return (np.abs(dx) <= e) & (
            (np.abs(dy - r * 0.7) <= w) | (np.abs(dy + r * 0.7) <= w)
        )
    # two vertical bars
    return (np.abs(dy) <= e) & ((np.abs(dx - r * 0.7) <= w) | (np.abs(dx + r * 0.7) <= w))


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic balanced dataset; labels are class-major blocks."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    count = spec.num_classes * spec.samples_per_class
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int32)
    jitter = size * 0.14
    index = 0
    for cls in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            cx = size / 2 + rng.uniform(-jitter, jitter)
            cy = size / 2 + rng.uniform(-jitter, jitter)
            scale = rng.uniform(0.85, 1.2)
            noise = rng.normal(0.0, spec.noise_std, size=(3, size, size))
            img = BACKGROUND + noise
            mask = _shape_mask(cls, size, cx, cy, scale)
            img[:, mask] = FOREGROUND
            images[index] = np.clip(img, 0.0, 1.0, out=img)
            labels[index] = cls
            index += 1
    return Dataset(images=images, labels=labels)


# ---------------------------------------------------------------------------
# file format


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    count = dataset.count
    c, h, w = dataset.image_shape
    header = _HEADER.pack(MAGIC, VERSION, count, c, h, w, 4)
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(images.tobytes())
        fh.write(labels.tobytes())


def read_dataset(path: str | Path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataFormatError("file shorter than the dataset header", offset=len(blob))
    magic, version, count, c, h, w, label_width = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported dataset version {version}", offset=4)
    if label_width != 4:
        raise DataFormatError(f"unsupported label width {label_width}", offset=24)
    image_bytes = count * c * h * w * 4
    expected = _HEADER.size + image_bytes + count * label_width
    if len(blob) != expected:
        raise DataFormatError(
            f"payload length mismatch: file has {len(blob)} bytes, header implies {expected}",
            offset=min(len(blob), expected),
        )
    images = np.frombuffer(blob, dtype="<f4", count=count * c * h * w, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype="<i4", count=count, offset=_HEADER.size + image_bytes)
    return Dataset(
        images=images.reshape(count, c, h, w).copy(),
        labels=labels.astype(np.int32, copy=True),
    )


def batches(
    dataset: Dataset, batch_size: int, shuffle_seed
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of batches in a deterministic shuffled order.

    The final partial batch is included. Pass a different seed (for example
    [base_seed, epoch]) to reshuffle between epochs reproducibly.
    """
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    if batch_size > dataset.count:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {dataset.count}")
    order = np.random.default_rng(shuffle_seed).permutation(dataset.count)
    for start in range(0, dataset.count, batch_size):
        index = order[start : start + batch_size]
        yield dataset.images[index], dataset.labels[index]
