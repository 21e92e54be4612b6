"""Tests for stand-alone retraining and the end-to-end pipeline."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dcss_nas.config import RunConfig, SupernetSpec
from dcss_nas.data.metrics import majority_baseline_miou
from dcss_nas.data.synthetic import Dataset, generate
from dcss_nas.decode import StandaloneNet, build_standalone, decode
from dcss_nas.errors import NumericalError
from dcss_nas.models import DecodedArchitecture, TrainResult
from dcss_nas.pipeline import ARCH_FILE, run_pipeline
from dcss_nas.tensor import Tensor, checkpoint, ops
from dcss_nas.train import DIAGNOSTICS, METRICS_CSV, RESULT_FILE, WEIGHTS_FILE, train_standalone
from tests.conftest import (
    make_arch_params,
    make_search_config,
    make_spec,
    make_train_config,
    read_csv,
)


def _decoded(spec: SupernetSpec) -> DecodedArchitecture:
    return decode(make_arch_params(spec.layers, beta=lambda rng, d: rng.normal(size=d)), spec)


def _net(spec: SupernetSpec, seed: int = 0) -> StandaloneNet:
    return build_standalone(_decoded(spec), seed=seed)


# ---------------------------------------------------------------------------
# Retraining
# ---------------------------------------------------------------------------


def test_zero_epochs_reports_initial_miou(tmp_path: Path, tiny_dataset: Dataset) -> None:
    spec = make_spec()
    net = _net(spec)
    before = net.state_dict()
    outcome = train_standalone(net, tiny_dataset, make_train_config(epochs=0), tmp_path)
    assert outcome.result.best_epoch == 0
    assert outcome.result.epochs == []
    assert 0.0 <= outcome.t_miou <= 1.0
    assert all(np.array_equal(before[k], outcome.weights[k]) for k in before)
    assert read_csv(tmp_path / METRICS_CSV) == []


def test_training_writes_artifacts(tmp_path: Path, tiny_dataset: Dataset) -> None:
    spec = make_spec()
    net = _net(spec)
    outcome = train_standalone(net, tiny_dataset, make_train_config(epochs=2), tmp_path)
    saved = TrainResult.model_validate_json((tmp_path / RESULT_FILE).read_text())
    assert saved.t_miou == pytest.approx(outcome.t_miou)
    assert saved.parameters == net.parameter_count()
    assert saved.flops > 0
    assert [int(r["epoch"]) for r in read_csv(tmp_path / METRICS_CSV)] == [1, 2]
    meta, weights = checkpoint.load(tmp_path / WEIGHTS_FILE)
    assert meta["kind"] == "standalone-weights"
    assert meta["epoch"] == outcome.result.best_epoch
    fresh = _net(spec, seed=5)
    fresh.load_state_dict(weights)


def test_training_is_deterministic(tiny_dataset: Dataset) -> None:
    spec = make_spec()
    a = train_standalone(_net(spec), tiny_dataset, make_train_config(epochs=2))
    b = train_standalone(_net(spec), tiny_dataset, make_train_config(epochs=2))
    assert a.t_miou == b.t_miou
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_best_epoch_never_below_baseline(tiny_dataset: Dataset) -> None:
    outcome = train_standalone(_net(make_spec()), tiny_dataset, make_train_config(epochs=2))
    assert outcome.t_miou >= max([e.val_miou for e in outcome.result.epochs], default=0.0)


def test_non_finite_loss_aborts_with_diagnostics(
    tmp_path: Path, tiny_dataset: Dataset, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.setattr(ops, "cross_entropy", lambda logits, labels: Tensor(np.array(np.nan)))
    with pytest.raises(NumericalError) as excinfo:
        train_standalone(_net(make_spec()), tiny_dataset, make_train_config(), tmp_path)
    assert excinfo.value.diagnostics == tmp_path / DIAGNOSTICS
    assert (tmp_path / DIAGNOSTICS).exists()


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def test_pipeline_writes_stage_directories(tmp_path: Path, tiny_dataset: Dataset) -> None:
    run = run_pipeline(
        tiny_dataset, make_spec(), make_search_config(), make_train_config(), tmp_path
    )
    assert (tmp_path / ARCH_FILE).exists()
    assert (tmp_path / "search" / "search.json").exists()
    assert (tmp_path / "train" / RESULT_FILE).exists()
    saved = DecodedArchitecture.model_validate_json((tmp_path / ARCH_FILE).read_text())
    assert saved.edges == run.decoded.edges
    assert len(saved.provenance) == 64
    assert 0.0 <= run.s_miou <= 1.0 and 0.0 <= run.t_miou <= 1.0


def test_pipeline_with_inherited_weights(tmp_path: Path, tiny_dataset: Dataset) -> None:
    run = run_pipeline(
        tiny_dataset,
        make_spec(),
        make_search_config(),
        make_train_config(init="inherit", epochs=0),
        tmp_path,
    )
    assert run.parameters > 0


def test_pipeline_in_memory(tiny_dataset: Dataset) -> None:
    run = run_pipeline(
        tiny_dataset, make_spec(), make_search_config(), make_train_config(init="inherit")
    )
    assert run.flops > 0


@pytest.mark.slow
def test_desk_pipeline_beats_majority_baseline(tmp_path: Path) -> None:
    config = RunConfig()
    dataset = generate(config.dataset)
    run = run_pipeline(dataset, config.supernet, config.search, config.train, tmp_path)
    for degree in run.decoded.in_degrees().values():
        assert 1 <= degree <= config.supernet.in_degree
    baseline = majority_baseline_miou(
        dataset.train_union().labels, dataset.val.labels, config.dataset.num_classes
    )
    assert run.t_miou > baseline
