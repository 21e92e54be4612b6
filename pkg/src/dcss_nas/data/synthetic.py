"""Deterministic synthetic segmentation dataset.

Every image is a textured background (class 0) overlaid with 3-6 random
shapes (rectangles, disks, stripes); each shape carries a foreground class
whose base color is fixed per class, jittered per shape and per pixel. The
label of a pixel is the class of the topmost shape covering it. Sample ``i``
of the pool is drawn from its own generator keyed by ``(seed, i)``, and the
pool is partitioned into trainA / trainB / val by a seeded permutation.

Pixel values are quantized to multiples of 1/255 so that the binary split
files (one byte per channel) reproduce the in-memory dataset exactly.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger

from dcss_nas.config import DatasetSpec
from dcss_nas.tensor.core import Tensor

if TYPE_CHECKING:
    from numpy.typing import NDArray

SPLIT_NAMES = ("trainA", "trainB", "val")
IGNORE_INDEX = 255


@dataclass(frozen=True)
class SegSample:
    image: NDArray[np.float64]  # [3, H, W] in [0, 1]
    label: NDArray[np.uint8]  # [H, W]

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise ValueError(f"label {self.label.shape} does not match image {self.image.shape}")


@dataclass
class Split:
    name: str
    images: NDArray[np.float64]  # [n, 3, H, W]
    labels: NDArray[np.uint8]  # [n, H, W]

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def sample(self, index: int) -> SegSample:
        return SegSample(self.images[index], self.labels[index])

    def batch(self, indices: NDArray[np.int64] | list[int]) -> tuple[Tensor, NDArray[np.int64]]:
        idx = np.asarray(indices, dtype=np.int64)
        return Tensor(self.images[idx]), self.labels[idx].astype(np.int64)


@dataclass
class Dataset:
    spec: DatasetSpec
    train_a: Split
    train_b: Split
    val: Split

    @property
    def splits(self) -> dict[str, Split]:
        return {"trainA": self.train_a, "trainB": self.train_b, "val": self.val}

    def train_union(self) -> Split:
        """trainA and trainB concatenated (the stand-alone retraining set)."""
        return Split(
            "train",
            np.concatenate([self.train_a.images, self.train_b.images]),
            np.concatenate([self.train_a.labels, self.train_b.labels]),
        )


def class_palette(num_classes: int) -> NDArray[np.float64]:
    """Base RGB per class; class 0 is mid gray, foreground hues are evenly spaced."""
    palette = np.empty((num_classes, 3))
    palette[0] = 0.5
    for c in range(1, num_classes):
        palette[c] = colorsys.hsv_to_rgb((c - 1) / (num_classes - 1), 0.8, 0.9)
    return palette


def _background(rng: np.random.Generator, size: int) -> NDArray[np.float64]:
    yy, xx = np.mgrid[0:size, 0:size] / size
    fx, fy = rng.uniform(1.0, 4.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    texture = np.stack(
        [0.08 * np.sin(2 * np.pi * (fx * xx + fy * yy) + p) for p in phase]
    )
    return 0.5 + texture


def _shape_mask(rng: np.random.Generator, size: int) -> NDArray[np.bool_]:
    yy, xx = np.mgrid[0:size, 0:size]
    kind = rng.integers(3)
    if kind == 0:
        h, w = rng.integers(size // 8, size // 2 + 1, size=2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    if kind == 1:
        radius = rng.uniform(size / 12, size / 4)
        cy, cx = rng.uniform(0, size, size=2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    angle = rng.uniform(0, np.pi)
    half = rng.uniform(size / 32, size / 12)
    offset = rng.uniform(-size / 3, size / 3)
    dist = (xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle) - offset
    return np.abs(dist) <= half


def render_sample(spec: DatasetSpec, index: int) -> SegSample:
    """Sample ``index`` of the pool generated from ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    palette = class_palette(spec.num_classes)
    image = _background(rng, size)
    label = np.zeros((size, size), dtype=np.uint8)
    for _ in range(int(rng.integers(3, 7))):
        cls = int(rng.integers(1, spec.num_classes))
        mask = _shape_mask(rng, size)
        color = palette[cls] + rng.normal(0.0, 0.08, size=3)
        image[:, mask] = color[:, None]
        label[mask] = cls
    image += rng.normal(0.0, 0.05, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return SegSample(image, label)


def split_indices(spec: DatasetSpec) -> dict[str, NDArray[np.int64]]:
    """Disjoint, exhaustive pool indices per split, each sorted ascending."""
    order = np.random.default_rng([spec.seed, 7]).permutation(spec.size)
    n_a, n_b, _ = spec.counts
    parts = (order[:n_a], order[n_a : n_a + n_b], order[n_a + n_b :])
    return {name: np.sort(p).astype(np.int64) for name, p in zip(SPLIT_NAMES, parts, strict=True)}


def generate(spec: DatasetSpec) -> Dataset:
    """Render the full pool and partition it into trainA / trainB / val."""
    samples = [render_sample(spec, i) for i in range(spec.size)]
    splits = []
    for name, idx in split_indices(spec).items():
        splits.append(
            Split(
                name,
                np.stack([samples[i].image for i in idx]),
                np.stack([samples[i].label for i in idx]),
            )
        )
    logger.info(
        f"Generated {spec.size} samples ({spec.image_size}x{spec.image_size}, "
        f"{spec.num_classes} classes): " + ", ".join(f"{s.name}={len(s)}" for s in splits)
    )
    return Dataset(spec, *splits)
