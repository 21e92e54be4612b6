"""Stand-alone retraining of a decoded architecture.

Cross entropy only: no regularizers, no path sampling. Momentum SGD with the
poly schedule runs over the union of trainA and trainB; the result is the
best validation mIoU seen (T-mIoU).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger

from dcss_nas.artifacts import save_json_model, write_csv
from dcss_nas.complexity import count_flops
from dcss_nas.config import LrSchedule, OptimizerConfig, TrainConfig
from dcss_nas.data.loader import BatchStream, evaluate_miou
from dcss_nas.errors import NumericalError
from dcss_nas.models import TrainEpoch, TrainResult
from dcss_nas.nn import conv_weight_names
from dcss_nas.optim import SGD, poly_lr
from dcss_nas.tensor import checkpoint, ops
from dcss_nas.tensor.core import backward

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from dcss_nas.data.synthetic import Dataset
    from dcss_nas.decode import StandaloneNet

WEIGHTS_FILE = "weights.ckpt"
METRICS_CSV = "train_metrics.csv"
RESULT_FILE = "train.json"
DIAGNOSTICS = "diagnostics.json"
TRAIN_COLUMNS = ("epoch", "train_ce", "val_miou")

STREAM_TRAIN = 13


@dataclass
class TrainOutcome:
    t_miou: float
    result: TrainResult
    weights: dict[str, NDArray[np.float64]] = field(repr=False)


def _val_miou(net: StandaloneNet, dataset: Dataset) -> float:
    net.eval()
    try:
        return evaluate_miou(net, dataset.val, dataset.spec.num_classes)
    finally:
        net.train()


def _abort(out_dir: Path | None, epoch: int, iteration: int, loss: float) -> None:
    path = None
    if out_dir is not None:
        path = out_dir / DIAGNOSTICS
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"phase": "train", "epoch": epoch, "iteration": iteration, "loss": repr(loss)}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    raise NumericalError(
        f"non-finite training loss at epoch {epoch}, iteration {iteration}", diagnostics=path
    )


def train_standalone(
    net: StandaloneNet,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: Path | None = None,
) -> TrainOutcome:
    """Train ``net`` in place and return its best validation mIoU with the matching weights."""
    union = dataset.train_union()
    stream = BatchStream(
        union, config.batch_size, config.seed, STREAM_TRAIN, augment=config.augment
    )
    steps = config.steps_per_epoch or stream.batches_per_pass
    schedule = LrSchedule(base_lr=config.lr, max_iter=max(config.epochs * steps, 1))
    sgd = SGD(
        list(net.named_parameters()),
        OptimizerConfig(
            kind="sgd",
            base_lr=config.lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        ),
        conv_weight_names(net),
    )
    size = dataset.spec.image_size
    flops = count_flops(net, (1, 3, size, size))
    logger.info(
        f"Retraining: {net.parameter_count()} parameters, {flops} MACs, "
        f"{config.epochs} epochs x {steps} steps on {len(union)} images"
    )

    best_miou = _val_miou(net, dataset)
    best_epoch = 0
    best_weights = net.state_dict()
    history: list[TrainEpoch] = []
    iteration = 0
    net.train()
    for epoch in range(1, config.epochs + 1):
        losses = []
        for _ in range(steps):
            images, labels = stream.next()
            sgd.zero_grad()
            loss = ops.cross_entropy(net(images), labels)
            value = float(loss.item())
            if not math.isfinite(value):
                _abort(out_dir, epoch, iteration, value)
            backward(loss)
            sgd.step(poly_lr(iteration, schedule))
            iteration += 1
            losses.append(value)
        val = _val_miou(net, dataset)
        history.append(TrainEpoch(epoch=epoch, train_ce=float(np.mean(losses)), val_miou=val))
        logger.info(
            f"Epoch {epoch}/{config.epochs}: train_ce={np.mean(losses):.4f} val_miou={val:.4f}"
        )
        if val > best_miou:
            best_miou, best_epoch = val, epoch
            best_weights = net.state_dict()

    result = TrainResult(
        t_miou=best_miou,
        best_epoch=best_epoch,
        parameters=net.parameter_count(),
        flops=flops,
        epochs=history,
    )
    if out_dir is not None:
        checkpoint.save(
            out_dir / WEIGHTS_FILE,
            {k: best_weights[k] for k in sorted(best_weights)},
            {"kind": "standalone-weights", "epoch": best_epoch, "t_miou": best_miou},
        )
        write_csv(
            out_dir / METRICS_CSV,
            TRAIN_COLUMNS,
            [[str(e.epoch), repr(e.train_ce), repr(e.val_miou)] for e in history],
        )
        save_json_model(result, out_dir / RESULT_FILE)
    logger.info(f"Retraining finished: T-mIoU={best_miou:.4f} at epoch {best_epoch}")
    return TrainOutcome(best_miou, result, best_weights)
