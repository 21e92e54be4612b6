"""Shared test helpers for dcss-nas."""

from __future__ import annotations

import csv
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from dcss_nas.config import DatasetSpec, SearchConfig, SplitSpec, SupernetSpec, TrainConfig
from dcss_nas.data.synthetic import Dataset, generate
from dcss_nas.models import TrialRecord
from dcss_nas.supernet.params import ArchParams
from dcss_nas.supernet.space import OPERATOR_SPACE, fusion_nodes
from dcss_nas.tensor.core import Tensor


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run desk-scale experiments"
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_spec(**overrides: object) -> SupernetSpec:
    """Two-layer, narrow supernet that runs a forward pass in well under a second."""
    values: dict[str, object] = {
        "layers": 2,
        "width": 4,
        "in_degree": 2,
        "channel_ratio": 1.0,
        "num_classes": 3,
        "stem_channels": 8,
    }
    values.update(overrides)
    return SupernetSpec.model_validate(values)


def make_dataset_spec(**overrides: object) -> DatasetSpec:
    values: dict[str, object] = {
        "num_classes": 3,
        "image_size": 32,
        "size": 14,
        "split": SplitSpec(),
        "seed": 0,
    }
    values.update(overrides)
    return DatasetSpec.model_validate(values)


def make_search_config(**overrides: object) -> SearchConfig:
    values: dict[str, object] = {
        "epochs": 1,
        "batch_size": 2,
        "steps_per_epoch": 1,
        "augment": False,
        "seed": 0,
    }
    values.update(overrides)
    return SearchConfig.model_validate(values)


def make_train_config(**overrides: object) -> TrainConfig:
    values: dict[str, object] = {
        "epochs": 1,
        "batch_size": 2,
        "steps_per_epoch": 1,
        "augment": False,
        "seed": 0,
    }
    values.update(overrides)
    return TrainConfig.model_validate(values)


def make_arch_params(
    layers: int = 2,
    *,
    beta: float | Callable[[np.random.Generator, int], np.ndarray] = 0.0,
    chosen: int = 0,
    seed: int = 0,
) -> ArchParams:
    """Architecture parameters with ``alpha`` peaked on operator ``chosen``.

    ``beta`` is either a constant for every edge or a callable drawing the
    logits of one node from ``(rng, in_degree)``.
    """
    rng = np.random.default_rng(seed)
    alpha = {}
    betas = {}
    for node in fusion_nodes(layers):
        logits = np.zeros(len(OPERATOR_SPACE))
        logits[chosen] = 1.0
        alpha[node] = Tensor(logits, requires_grad=True)
        degree = 4 * node.layer
        values = beta(rng, degree) if callable(beta) else np.full(degree, float(beta))
        betas[node] = Tensor(values, requires_grad=True)
    return ArchParams(layers, alpha, betas)


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def make_records(
    s_values: list[float],
    t_values: list[float] | None = None,
    *,
    seed0: int = 0,
) -> list[TrialRecord]:
    """Trial records pairing ``s_values`` with ``t_values`` (default: identical)."""
    t_values = t_values if t_values is not None else list(s_values)
    return [
        TrialRecord(trial_id=i, seed=seed0 + i, s_miou=s, t_miou=t, arch_path=f"trial_{i:03d}")
        for i, (s, t) in enumerate(zip(s_values, t_values, strict=True))
    ]


@pytest.fixture
def tiny_spec() -> SupernetSpec:
    return make_spec()


@pytest.fixture(scope="session")
def tiny_dataset() -> Dataset:
    return generate(make_dataset_spec())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
