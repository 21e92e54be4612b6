"""Search, decode and retrain one architecture end to end."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from loguru import logger

from dcss_nas.artifacts import save_json_model
from dcss_nas.decode import build_standalone, decode
from dcss_nas.search import run_search
from dcss_nas.train import train_standalone

if TYPE_CHECKING:
    from dcss_nas.config import SearchConfig, SupernetSpec, TrainConfig
    from dcss_nas.data.synthetic import Dataset
    from dcss_nas.models import DecodedArchitecture

ARCH_FILE = "arch.json"


@dataclass
class PipelineRun:
    s_miou: float
    t_miou: float
    decoded: DecodedArchitecture
    parameters: int
    flops: int


def run_pipeline(
    dataset: Dataset,
    spec: SupernetSpec,
    search: SearchConfig,
    train: TrainConfig,
    out_dir: Path | None = None,
) -> PipelineRun:
    """``run_search`` -> ``decode`` -> ``train_standalone``; artifacts go under ``out_dir``."""
    searched = run_search(dataset, spec, search, out_dir / "search" if out_dir else None)
    decoded = decode(searched.arch, spec, searched.result.arch_sha256)
    if out_dir is not None:
        save_json_model(decoded, out_dir / ARCH_FILE)

    # best-epoch weights, the same state save_best writes to the weights checkpoint
    supernet_state = searched.weights if train.init == "inherit" else None
    net = build_standalone(decoded, train.init, seed=train.seed, supernet_state=supernet_state)
    trained = train_standalone(net, dataset, train, out_dir / "train" if out_dir else None)
    logger.info(f"Pipeline: S-mIoU={searched.s_miou:.4f} T-mIoU={trained.t_miou:.4f}")
    return PipelineRun(
        s_miou=searched.s_miou,
        t_miou=trained.t_miou,
        decoded=decoded,
        parameters=trained.result.parameters,
        flops=trained.result.flops,
    )
