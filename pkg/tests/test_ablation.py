"""Tests for ablation sweeps."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from dcss_nas import ablation
from dcss_nas.data.synthetic import Dataset
from dcss_nas.errors import NumericalError
from dcss_nas.models import AblationReport
from dcss_nas.pipeline import PipelineRun
from tests.conftest import make_search_config, make_spec, make_train_config


def test_regularizer_variants_cover_every_subset() -> None:
    search = make_search_config(lambda_alpha=0.1, lambda_beta=0.2, lambda_con=0.3)
    found = list(ablation.variants("regularizers", make_spec(), search))
    labels = [label for label, _, _ in found]
    assert len(set(labels)) == 8
    assert labels[0] == "L_con+L_beta+L_alpha"
    assert labels[-1] == "none"
    full, bare = found[0][2], found[-1][2]
    assert (full.lambda_alpha, full.lambda_beta, full.lambda_con) == (0.1, 0.2, 0.3)
    assert (bare.lambda_alpha, bare.lambda_beta, bare.lambda_con) == (0.0, 0.0, 0.0)
    only_con = dict((label, cfg) for label, _, cfg in found)["L_con"]
    assert (only_con.lambda_alpha, only_con.lambda_beta, only_con.lambda_con) == (0.0, 0.0, 0.3)


def test_sampling_ratio_variants() -> None:
    found = list(ablation.variants("sampling-ratio", make_spec(), make_search_config()))
    assert [label for label, _, _ in found] == ["r=1", "r=0.5", "r=0.25", "r=0.125", "r=0.0625"]
    assert [spec.channel_ratio for _, spec, _ in found] == list(ablation.SAMPLING_RATIOS)


def test_in_degree_variants() -> None:
    found = list(ablation.variants("in-degree", make_spec(), make_search_config()))
    assert [spec.in_degree for _, spec, _ in found] == [1, 2, 3, 4, 5]


def test_depth_variants_cross_depths_with_ratios() -> None:
    found = list(ablation.variants("depth", make_spec(), make_search_config()))
    assert len(found) == len(ablation.DEPTHS) * len(ablation.SAMPLING_RATIOS)
    assert found[0][0] == "L=8,r=1"
    assert found[-1][0] == "L=14,r=0.0625"
    assert {spec.layers for _, spec, _ in found} == {8, 14}
    assert [spec.channel_ratio for _, spec, _ in found[:5]] == list(ablation.SAMPLING_RATIOS)
    assert all(spec.in_degree == make_spec().in_degree for _, spec, _ in found)


def test_search_budget_variants_scale_epochs_and_drop_regularizers() -> None:
    search = make_search_config(epochs=2, lambda_alpha=0.1, lambda_beta=0.2, lambda_con=0.3)
    found = list(ablation.variants("search-budget", make_spec(), search))
    assert [label for label, _, _ in found] == [
        "budget=1x+regs",
        "budget=1x",
        "budget=2x",
        "budget=3x",
        "budget=4x",
    ]
    assert [cfg.epochs for _, _, cfg in found] == [2, 2, 4, 6, 8]
    regs = found[0][2]
    assert (regs.lambda_alpha, regs.lambda_beta, regs.lambda_con) == (0.1, 0.2, 0.3)
    for _, spec, cfg in found[1:]:
        assert (cfg.lambda_alpha, cfg.lambda_beta, cfg.lambda_con) == (0.0, 0.0, 0.0)
        assert spec == make_spec()


def test_ablation_kinds_cover_every_branch() -> None:
    for kind in ablation.ABLATION_KINDS:
        assert list(ablation.variants(kind, make_spec(), make_search_config()))


def test_unknown_kind_rejected() -> None:
    with pytest.raises(ValueError):
        kind = "width"
        list(ablation.variants(kind, make_spec(), make_search_config()))  # type: ignore[arg-type]


def test_run_ablation_records_rows_and_failures(
    tmp_path: Path, tiny_dataset: Dataset, monkeypatch: pytest.MonkeyPatch
) -> None:
    seen: list[int] = []

    def fake_pipeline(dataset, spec, search, train, out_dir=None):  # type: ignore[no-untyped-def]
        seen.append(spec.in_degree)
        if spec.in_degree == 4:
            raise NumericalError("architecture loss is nan")
        return PipelineRun(
            s_miou=0.1 * spec.in_degree,
            t_miou=0.1,
            decoded=None,  # type: ignore[arg-type]
            parameters=100,
            flops=1000,
        )

    monkeypatch.setattr(ablation, "run_pipeline", fake_pipeline)
    report = ablation.run_ablation(
        tiny_dataset, make_spec(), make_search_config(), make_train_config(), "in-degree", tmp_path
    )
    assert seen == [1, 2, 3, 4, 5]
    assert [row.label for row in report.rows] == ["k=1", "k=2", "k=3", "k=5"]
    assert len(report.failed) == 1 and report.failed[0].startswith("k=4")
    doc = json.loads((tmp_path / ablation.REPORT_FILE).read_text())
    saved = AblationReport.model_validate(doc)
    assert saved == report


@pytest.mark.slow
def test_sampling_ratio_sweep_end_to_end(tmp_path: Path, tiny_dataset: Dataset) -> None:
    report = ablation.run_ablation(
        tiny_dataset,
        make_spec(),
        make_search_config(),
        make_train_config(),
        "sampling-ratio",
        tmp_path,
    )
    assert len(report.rows) + len(report.failed) == 5
    assert (tmp_path / "variant_00" / "arch.json").exists()
