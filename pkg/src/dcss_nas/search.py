"""Bilevel architecture search.

Every iteration first updates the supernet weights ``w`` with momentum SGD
on the cross entropy of a trainA batch, then updates the architecture
parameters ``(alpha, beta)`` with Adam on the cross entropy of a trainB batch
plus the three regularizers. Paths are re-sampled for each phase; the
sampling temperature anneals once per epoch. The best checkpoint by
validation mIoU (full-mode supernet, eval-mode batch norm) is kept.
"""

from __future__ import annotations

import contextlib
import json
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger

from dcss_nas.artifacts import save_json_model, write_csv
from dcss_nas.config import LrSchedule, OptimizerConfig, SearchConfig, SupernetSpec
from dcss_nas.data.loader import BatchStream, evaluate_miou
from dcss_nas.errors import ArtifactError, NumericalError
from dcss_nas.models import METRIC_COLUMNS, EpochMetrics, SearchResult
from dcss_nas.nn import conv_weight_names
from dcss_nas.optim import SGD, Adam, poly_lr
from dcss_nas.supernet.network import Supernet
from dcss_nas.supernet.params import ArchParams
from dcss_nas.supernet.sampling import draw_plan
from dcss_nas.tensor import checkpoint, ops
from dcss_nas.tensor.core import Tensor, backward, no_grad

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from dcss_nas.data.synthetic import Dataset

ARCH_CHECKPOINT = "checkpoint/arch.ckpt"
WEIGHTS_CHECKPOINT = "checkpoint/weights.ckpt"
RESUME_STATE = "resume/state.ckpt"
METRICS_CSV = "metrics.csv"
DIAGNOSTICS = "diagnostics.json"

# stream ids keep the trainA and trainB batch orders independent
STREAM_A, STREAM_B = 11, 12


# ---------------------------------------------------------------------------
# Regularizers
# ---------------------------------------------------------------------------


def reg_alpha(arch: ArchParams) -> Tensor:
    """Summed entropy of the operator distributions; zero only at one-hot weights."""
    terms = []
    for alpha in arch.alpha.values():
        w = ops.softmax(alpha)
        terms.append(-(w * ops.log_softmax(alpha)).sum())
    return ops.add_n(terms)


def reg_beta(arch: ArchParams) -> Tensor:
    """``sum -sigmoid(b) ln sigmoid(b)`` over every edge, as ``sigmoid(b) * softplus(-b)``."""
    terms = [(ops.sigmoid(beta) * ops.softplus(-beta)).sum() for beta in arch.beta.values()]
    return ops.add_n(terms)


def reg_con(arch: ArchParams, k: int) -> Tensor:
    """Hinge penalty keeping each node's soft in-degree ``sum sigmoid(beta)`` inside ``[1, k]``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = []
    for beta in arch.beta.values():
        degree = ops.sigmoid(beta).sum()
        terms.append(ops.relu(1.0 - degree) + ops.relu(degree - float(k)))
    return ops.add_n(terms)


@dataclass
class RegularizerValues:
    l_alpha: float
    l_beta: float
    l_con: float


def regularizer_values(arch: ArchParams, k: int) -> RegularizerValues:
    with no_grad():
        return RegularizerValues(
            reg_alpha(arch).item(), reg_beta(arch).item(), reg_con(arch, k).item()
        )


# ---------------------------------------------------------------------------
# Search state and one bilevel step
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def _frozen(params: list[Tensor]) -> Iterator[None]:
    """Temporarily exclude ``params`` from the tape."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags, strict=True):
            p.requires_grad = flag


@dataclass
class SearchState:
    spec: SupernetSpec
    config: SearchConfig
    net: Supernet
    arch: ArchParams
    sgd: SGD
    adam: Adam
    rng: np.random.Generator
    stream_a: BatchStream
    stream_b: BatchStream
    steps_per_epoch: int
    epoch: int = 0
    iteration: int = 0
    best_miou: float = -1.0
    best_epoch: int = -1
    history: list[EpochMetrics] = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def max_iter(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    def register_new_weights(self) -> None:
        added = self.sgd.register(list(self.net.named_parameters()), conv_weight_names(self.net))
        if added:
            logger.debug(f"Registered {added} new supernet tensors with the weight optimizer")


@dataclass
class StepLosses:
    train_a_ce: float
    train_b_ce: float


def init_search_state(
    dataset: Dataset,
    spec: SupernetSpec,
    config: SearchConfig,
    out_dir: Path | None = None,
) -> SearchState:
    for name, split in dataset.splits.items():
        if len(split) == 0:
            raise ArtifactError(f"dataset split {name!r} is empty")
    net = Supernet(spec, config.seed)
    arch = ArchParams.initialize(spec.layers, config.seed)
    sgd = SGD(
        list(net.named_parameters()),
        OptimizerConfig(
            kind="sgd",
            base_lr=config.lr_w,
            momentum=config.momentum_w,
            weight_decay=config.weight_decay_w,
        ),
        conv_weight_names(net),
    )
    adam = Adam(arch.named_parameters(), OptimizerConfig(kind="adam", base_lr=config.lr_arch))
    stream_a = BatchStream(
        dataset.train_a, config.batch_size, config.seed, STREAM_A, augment=config.augment
    )
    stream_b = BatchStream(
        dataset.train_b, config.batch_size, config.seed, STREAM_B, augment=config.augment
    )
    steps = config.steps_per_epoch or stream_a.batches_per_pass
    return SearchState(
        spec=spec,
        config=config,
        net=net,
        arch=arch,
        sgd=sgd,
        adam=adam,
        rng=np.random.default_rng([config.seed, 6]),
        stream_a=stream_a,
        stream_b=stream_b,
        steps_per_epoch=steps,
        out_dir=out_dir,
    )


def _write_diagnostics(state: SearchState, phase: str, losses: dict[str, float]) -> Path | None:
    if state.out_dir is None:
        return None
    bad_weights = [n for n, p in state.net.named_parameters() if not np.all(np.isfinite(p.data))]
    bad_arch = [n for n, p in state.arch.named_parameters() if not np.all(np.isfinite(p.data))]
    doc = {
        "phase": phase,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "losses": {k: repr(v) for k, v in losses.items()},
        "nonfinite_weights": bad_weights,
        "nonfinite_arch": bad_arch,
        "config": state.config.model_dump(mode="json"),
    }
    path = state.out_dir / DIAGNOSTICS
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        logger.warning(f"Failed to write diagnostics snapshot {path}: {e}")
        return None
    return path


def _check_finite(state: SearchState, phase: str, loss: float, **parts: float) -> None:
    if math.isfinite(loss):
        return
    path = _write_diagnostics(state, phase, {"loss": loss, **parts})
    logger.error(f"Non-finite {phase} loss at epoch {state.epoch}, iteration {state.iteration}")
    raise NumericalError(
        f"{phase} loss is {loss} at iteration {state.iteration}", diagnostics=path
    )


def search_step(
    state: SearchState,
    batch_a: tuple[Tensor, NDArray[np.int64]],
    batch_b: tuple[Tensor, NDArray[np.int64]],
    tau: float,
) -> StepLosses:
    """One weight update on trainA followed by one architecture update on trainB."""
    cfg = state.config
    n_paths = state.spec.paths
    lr_w = poly_lr(state.iteration, LrSchedule(base_lr=cfg.lr_w, max_iter=max(state.max_iter, 1)))
    lr_arch = poly_lr(
        state.iteration, LrSchedule(base_lr=cfg.lr_arch, max_iter=max(state.max_iter, 1))
    )

    # phase 1: w <- w - lr * grad_w CE(trainA)
    images_a, labels_a = batch_a
    plan = draw_plan(state.arch, tau, n_paths, state.rng)
    with _frozen(state.arch.parameters()):
        ce_a = ops.cross_entropy(state.net(images_a, state.arch, plan), labels_a)
        _check_finite(state, "weight", ce_a.item())
        state.register_new_weights()
        state.sgd.zero_grad()
        backward(ce_a)
        state.sgd.step(lr_w)
        state.sgd.zero_grad()

    # phase 2: (alpha, beta) <- Adam on CE(trainB) + lambda * regularizers
    images_b, labels_b = batch_b
    plan = draw_plan(state.arch, tau, n_paths, state.rng)
    if cfg.freeze_arch:
        with no_grad():
            ce_b_value = ops.cross_entropy(state.net(images_b, state.arch, plan), labels_b).item()
        state.register_new_weights()
    else:
        ce_b = ops.cross_entropy(state.net(images_b, state.arch, plan), labels_b)
        loss = ce_b
        if cfg.lambda_alpha:
            loss = loss + cfg.lambda_alpha * reg_alpha(state.arch)
        if cfg.lambda_beta:
            loss = loss + cfg.lambda_beta * reg_beta(state.arch)
        if cfg.lambda_con:
            loss = loss + cfg.lambda_con * reg_con(state.arch, state.spec.in_degree)
        ce_b_value = ce_b.item()
        _check_finite(state, "architecture", loss.item(), ce=ce_b_value)
        state.register_new_weights()
        state.adam.zero_grad()
        backward(loss)
        state.adam.step(lr_arch)
        state.adam.zero_grad()
        state.net.zero_grad()

    state.iteration += 1
    return StepLosses(ce_a.item(), ce_b_value)


def validation_miou(net: Supernet, arch: ArchParams, dataset: Dataset, num_classes: int) -> float:
    """S-mIoU: full-mode supernet with eval-mode batch norm on the val split."""
    net.eval()
    try:
        return evaluate_miou(lambda x: net(x, arch), dataset.val, num_classes)
    finally:
        net.train()


# ---------------------------------------------------------------------------
# Persistence of best checkpoint and resume state
# ---------------------------------------------------------------------------


def _sorted_state(state: dict[str, NDArray[np.float64]]) -> dict[str, NDArray[np.float64]]:
    return {k: state[k] for k in sorted(state)}


def save_best(state: SearchState, s_miou: float) -> None:
    if state.out_dir is None:
        return
    extra = {"epoch": state.epoch, "s_miou": s_miou, "seed": state.config.seed}
    state.arch.save(state.out_dir / ARCH_CHECKPOINT, state.spec, extra)
    checkpoint.save(
        state.out_dir / WEIGHTS_CHECKPOINT,
        _sorted_state(state.net.state_dict()),
        {"kind": "supernet-weights", "spec": state.spec.model_dump(mode="json"), **extra},
    )


def save_resume(
    state: SearchState,
    best_arch: dict[str, NDArray[np.float64]],
    best_weights: dict[str, NDArray[np.float64]],
) -> None:
    if state.out_dir is None:
        return
    tensors: dict[str, NDArray[np.float64]] = {}
    tensors.update({f"net/{k}": v for k, v in _sorted_state(state.net.state_dict()).items()})
    tensors.update({f"arch/{k}": v for k, v in state.arch.arrays().items()})
    tensors.update({f"best_arch/{k}": v for k, v in best_arch.items()})
    tensors.update({f"best_net/{k}": v for k, v in _sorted_state(best_weights).items()})
    tensors.update({f"sgd/{k}": v for k, v in _sorted_state(state.sgd.state_dict()).items()})
    tensors.update({f"adam/{k}": v for k, v in _sorted_state(state.adam.state_dict()).items()})
    meta = {
        "kind": "search-resume",
        "epoch": state.epoch,
        "iteration": state.iteration,
        "best_miou": state.best_miou,
        "best_epoch": state.best_epoch,
        "stream_a": state.stream_a.batches_drawn,
        "stream_b": state.stream_b.batches_drawn,
        "rng": state.rng.bit_generator.state,
        "history": [m.model_dump(mode="json") for m in state.history],
        "config": state.config.model_dump(mode="json"),
        "spec": state.spec.model_dump(mode="json"),
    }
    checkpoint.save(state.out_dir / RESUME_STATE, tensors, meta)


def restore_resume(
    state: SearchState, path: Path
) -> tuple[dict[str, NDArray[np.float64]], dict[str, NDArray[np.float64]]]:
    """Load a resume checkpoint into ``state``; returns the best architecture and weights."""
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "search-resume":
        raise ArtifactError(f"{path}: not a search resume checkpoint")
    if meta["config"] != state.config.model_dump(mode="json") or meta[
        "spec"
    ] != state.spec.model_dump(mode="json"):
        raise ArtifactError(f"{path}: configuration differs from the run being resumed")

    def section(prefix: str) -> dict[str, NDArray[np.float64]]:
        return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}

    weights = section("net/")
    state.net.ensure_alignments(weights)
    state.net.load_state_dict(weights)
    state.register_new_weights()
    state.arch.load_arrays(section("arch/"))
    state.sgd.load_state_dict(section("sgd/"))
    state.adam.load_state_dict(section("adam/"))
    state.epoch = int(meta["epoch"])
    state.iteration = int(meta["iteration"])
    state.best_miou = float(meta["best_miou"])
    state.best_epoch = int(meta["best_epoch"])
    state.stream_a.batches_drawn = int(meta["stream_a"])
    state.stream_b.batches_drawn = int(meta["stream_b"])
    state.rng.bit_generator.state = meta["rng"]
    state.history = [EpochMetrics.model_validate(m) for m in meta["history"]]
    logger.info(f"Resumed search at epoch {state.epoch} (iteration {state.iteration})")
    return section("best_arch/"), section("best_net/")


# ---------------------------------------------------------------------------
# Full search
# ---------------------------------------------------------------------------


@dataclass
class SearchOutcome:
    arch: ArchParams
    s_miou: float
    result: SearchResult
    net: Supernet = field(repr=False)
    # supernet state at the best epoch, paired with ``arch``
    weights: dict[str, NDArray[np.float64]] = field(default_factory=dict, repr=False)


def run_search(
    dataset: Dataset,
    spec: SupernetSpec,
    config: SearchConfig,
    out_dir: Path | None = None,
    *,
    resume: bool = False,
) -> SearchOutcome:
    """Search for ``config.epochs`` epochs and return the best-by-validation architecture.

    With ``epochs=0`` the initialization itself is evaluated and returned.
    """
    state = init_search_state(dataset, spec, config, out_dir)
    num_classes = dataset.spec.num_classes
    best_arch = state.arch.arrays()
    best_weights = state.net.state_dict()

    resume_path = out_dir / RESUME_STATE if out_dir is not None else None
    if resume and resume_path is not None and resume_path.exists():
        best_arch, best_weights = restore_resume(state, resume_path)
        if not best_weights:
            best_weights = state.net.state_dict()

    logger.info(
        f"Search: L={spec.layers} F={spec.width} k={spec.in_degree} r={spec.channel_ratio} "
        f"n_paths={spec.paths}, {config.epochs} epochs x {state.steps_per_epoch} steps"
    )

    if config.epochs == 0:
        s_miou = validation_miou(state.net, state.arch, dataset, num_classes)
        state.best_miou, state.best_epoch = s_miou, 0
        best_weights = state.net.state_dict()
        save_best(state, s_miou)

    while state.epoch < config.epochs:
        tau = config.sampler.tau(state.epoch, config.epochs)
        ce_a, ce_b = [], []
        for _ in range(state.steps_per_epoch):
            losses = search_step(state, state.stream_a.next(), state.stream_b.next(), tau)
            ce_a.append(losses.train_a_ce)
            ce_b.append(losses.train_b_ce)
        regs = regularizer_values(state.arch, spec.in_degree)
        val = validation_miou(state.net, state.arch, dataset, num_classes)
        state.epoch += 1
        metrics = EpochMetrics(
            epoch=state.epoch,
            train_a_ce=float(np.mean(ce_a)),
            train_b_ce=float(np.mean(ce_b)),
            l_alpha=regs.l_alpha,
            l_beta=regs.l_beta,
            l_con=regs.l_con,
            tau=tau,
            val_miou=val,
        )
        state.history.append(metrics)
        logger.info(
            f"Epoch {state.epoch}/{config.epochs}: trainA_ce={metrics.train_a_ce:.4f} "
            f"trainB_ce={metrics.train_b_ce:.4f} tau={tau:.3f} val_miou={val:.4f}"
        )
        if val > state.best_miou:
            state.best_miou, state.best_epoch = val, state.epoch
            best_arch = state.arch.arrays()
            best_weights = state.net.state_dict()
            save_best(state, val)
        if out_dir is not None:
            write_csv(out_dir / METRICS_CSV, METRIC_COLUMNS, [m.row() for m in state.history])
            save_resume(state, best_arch, best_weights)

    if out_dir is not None and config.epochs == 0:
        write_csv(out_dir / METRICS_CSV, METRIC_COLUMNS, [])

    best = state.arch.copy()
    best.load_arrays(best_arch)
    digest = ""
    if out_dir is not None:
        digest = checkpoint.file_sha256(out_dir / ARCH_CHECKPOINT)
    result = SearchResult(
        s_miou=state.best_miou,
        best_epoch=state.best_epoch,
        checkpoint=ARCH_CHECKPOINT if out_dir is not None else "",
        arch_sha256=digest,
        epochs=state.history,
    )
    if out_dir is not None:
        save_json_model(result, out_dir / "search.json")
    logger.info(f"Search finished: S-mIoU={state.best_miou:.4f} at epoch {state.best_epoch}")
    return SearchOutcome(best, state.best_miou, result, state.net, _sorted_state(best_weights))

