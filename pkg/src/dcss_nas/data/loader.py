"""Seeded mini-batch streams and validation-set evaluation."""

from __future__ import annotations

from collections.abc import Callable
from typing import TYPE_CHECKING

import numpy as np

from dcss_nas.data.augment import augment
from dcss_nas.data.metrics import ConfusionMatrix
from dcss_nas.data.synthetic import Split
from dcss_nas.tensor.core import Tensor, no_grad

if TYPE_CHECKING:
    from numpy.typing import NDArray


class BatchStream:
    """Endless stream of mini-batches over one split.

    Each pass visits the split in an order drawn from ``(seed, stream, pass)``;
    a trailing remainder smaller than ``batch_size`` is skipped. Augmentation
    of batch ``b`` uses a generator keyed by ``(seed, stream, b)``, so the
    stream is reproducible from its position alone.
    """

    def __init__(
        self,
        split: Split,
        batch_size: int,
        seed: int,
        stream: int,
        *,
        augment: bool = False,
    ) -> None:
        if len(split) == 0:
            raise ValueError(f"split {split.name!r} is empty")
        self.split = split
        self.batch_size = min(batch_size, len(split))
        self.seed = seed
        self.stream = stream
        self.augment = augment
        self.batches_drawn = 0

    @property
    def batches_per_pass(self) -> int:
        return len(self.split) // self.batch_size

    def _order(self, pass_index: int) -> NDArray[np.int64]:
        rng = np.random.default_rng([self.seed, self.stream, pass_index])
        return rng.permutation(len(self.split)).astype(np.int64)

    def indices(self, batch_index: int) -> NDArray[np.int64]:
        pass_index, within = divmod(batch_index, self.batches_per_pass)
        start = within * self.batch_size
        return self._order(pass_index)[start : start + self.batch_size]

    def next(self) -> tuple[Tensor, NDArray[np.int64]]:
        batch_index = self.batches_drawn
        self.batches_drawn += 1
        idx = self.indices(batch_index)
        if not self.augment:
            return self.split.batch(idx)
        rng = np.random.default_rng([self.seed, self.stream, 1_000_003, batch_index])
        samples = [augment(self.split.sample(int(i)), rng) for i in idx]
        images = np.stack([s.image for s in samples])
        labels = np.stack([s.label for s in samples]).astype(np.int64)
        return Tensor(images), labels


def evaluate_miou(
    predict: Callable[[Tensor], Tensor],
    split: Split,
    num_classes: int,
    batch_size: int = 8,
) -> float:
    """Validation mIoU of ``argmax(predict(images))`` over the whole split."""
    cm = ConfusionMatrix(num_classes)
    with no_grad():
        for start in range(0, len(split), batch_size):
            images, labels = split.batch(np.arange(start, min(start + batch_size, len(split))))
            logits = predict(images)
            cm.update(np.argmax(logits.data, axis=1), labels)
    return cm.miou()
