"""Mean intersection-over-union from an accumulated confusion matrix."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

import numpy as np

from dcss_nas.errors import LabelError, NumericalError

if TYPE_CHECKING:
    from numpy.typing import NDArray

IGNORE_INDEX = 255


class ConfusionMatrix:
    """``matrix[t, p]`` counts pixels with target ``t`` predicted as ``p``.

    Pixels whose target equals ``ignore_index`` are skipped. Accumulating
    batch by batch gives exactly the matrix of the concatenated data.
    """

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX) -> None:
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: NDArray[Any], target: NDArray[Any]) -> None:
        pred = np.asarray(pred)
        target = np.asarray(target)
        if pred.shape != target.shape:
            raise ValueError(f"pred {pred.shape} and target {target.shape} differ in shape")
        valid = target != self.ignore_index
        t = target[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        c = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= c):
            raise LabelError(f"target labels must lie in [0, {c}) or equal {self.ignore_index}")
        if p.size and (p.min() < 0 or p.max() >= c):
            raise LabelError(f"predicted labels must lie in [0, {c})")
        self.matrix += np.bincount(t * c + p, minlength=c * c).reshape(c, c)

    def merge(self, other: ConfusionMatrix) -> None:
        self.matrix += other.matrix

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def iou(self) -> NDArray[np.float64]:
        """Per-class IoU; NaN for classes absent from both prediction and target."""
        tp = np.diag(self.matrix).astype(np.float64)
        denom = self.matrix.sum(axis=0) + self.matrix.sum(axis=1) - tp
        out = np.full(self.num_classes, np.nan)
        present = denom > 0
        out[present] = tp[present] / denom[present]
        return out

    def miou(self) -> float:
        if self.total == 0:
            raise NumericalError("mIoU undefined: no pixel with a valid target")
        return float(np.nanmean(self.iou()))


def miou(
    pred: NDArray[Any],
    target: NDArray[Any],
    num_classes: int,
    ignore_index: int = IGNORE_INDEX,
) -> tuple[float, NDArray[np.float64]]:
    """mIoU and per-class IoU (NaN marks classes excluded from the mean)."""
    cm = ConfusionMatrix(num_classes, ignore_index)
    cm.update(pred, target)
    return cm.miou(), cm.iou()


def majority_class(
    labels: NDArray[Any], num_classes: int, ignore_index: int = IGNORE_INDEX
) -> int:
    flat = np.asarray(labels).ravel()
    counts = np.bincount(flat[flat != ignore_index].astype(np.int64), minlength=num_classes)
    return int(np.argmax(counts))


def majority_baseline_miou(
    train_labels: NDArray[Any],
    eval_labels: NDArray[Any],
    num_classes: int,
    ignore_index: int = IGNORE_INDEX,
) -> float:
    """mIoU of predicting the most frequent training class at every pixel."""
    cls = majority_class(train_labels, num_classes, ignore_index)
    target = np.asarray(eval_labels)
    return miou(np.full(target.shape, cls), target, num_classes, ignore_index)[0]
