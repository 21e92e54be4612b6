"""Training-time augmentation: random rescale, random crop, horizontal flip.

Parameters are drawn first (:func:`draw_params`) and applied separately
(:func:`apply`) so a draw can be pinned in tests. Images resize bilinearly,
labels by nearest neighbor; when the rescaled sample is smaller than the
crop it is padded with zeros (image) and the ignore index (label).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from dcss_nas.data.synthetic import IGNORE_INDEX, SegSample
from dcss_nas.tensor import ops
from dcss_nas.tensor.core import Tensor, no_grad

if TYPE_CHECKING:
    from numpy.typing import NDArray

SCALE_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class AugmentParams:
    scale: float
    top: int
    left: int
    flip: bool


def draw_params(
    rng: np.random.Generator,
    height: int,
    width: int,
    crop: int,
    *,
    scale_range: tuple[float, float] = SCALE_RANGE,
    flip_prob: float = 0.5,
) -> AugmentParams:
    scale = float(rng.uniform(*scale_range))
    sh, sw = max(1, round(height * scale)), max(1, round(width * scale))
    top = int(rng.integers(0, max(sh - crop, 0) + 1))
    left = int(rng.integers(0, max(sw - crop, 0) + 1))
    return AugmentParams(scale, top, left, bool(rng.random() < flip_prob))


def nearest_indices(in_size: int, out_size: int) -> NDArray[np.int64]:
    src = np.floor((np.arange(out_size) + 0.5) * in_size / out_size).astype(np.int64)
    return np.minimum(src, in_size - 1)


def flip(sample: SegSample) -> SegSample:
    return SegSample(sample.image[:, :, ::-1].copy(), sample.label[:, ::-1].copy())


def apply(sample: SegSample, params: AugmentParams, crop: int) -> SegSample:
    _, h, w = sample.image.shape
    sh, sw = max(1, round(h * params.scale)), max(1, round(w * params.scale))
    if (sh, sw) == (h, w):
        image, label = sample.image, sample.label
    else:
        with no_grad():
            image = ops.resize_bilinear(Tensor(sample.image[None]), sh, sw).data[0]
        label = sample.label[np.ix_(nearest_indices(h, sh), nearest_indices(w, sw))]

    ph, pw = max(crop - sh, 0), max(crop - sw, 0)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)

    t, l = params.top, params.left
    out = SegSample(
        image[:, t : t + crop, l : l + crop].copy(), label[t : t + crop, l : l + crop].copy()
    )
    return flip(out) if params.flip else out


def augment(sample: SegSample, rng: np.random.Generator, crop: int | None = None) -> SegSample:
    _, h, w = sample.image.shape
    size = crop if crop is not None else h
    return apply(sample, draw_params(rng, h, w, size), size)
