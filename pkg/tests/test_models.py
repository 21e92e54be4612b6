"""Tests for result documents and the artifact helpers that store them."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from loguru import logger
from pydantic import ValidationError

from dcss_nas.artifacts import (
    RESOLVED_CONFIG,
    RUN_LOG,
    add_run_log,
    architecture_dot,
    load_json_model,
    require_json_model,
    save_json_model,
    write_resolved_config,
)
from dcss_nas.config import RunConfig
from dcss_nas.errors import ArtifactError
from dcss_nas.models import (
    METRIC_COLUMNS,
    DecodedArchitecture,
    EpochMetrics,
    NodeEntry,
    TrialRecord,
)
from dcss_nas.supernet import NodeId, OperatorConfig
from tests.conftest import make_spec


def _arch(**overrides: object) -> DecodedArchitecture:
    """Two-layer chain s0_l0 -> s0_l1 -> every final node."""
    values: dict[str, object] = {
        "nodes": [NodeEntry(id="s0_l1", op="k3e3")]
        + [NodeEntry(id=f"s{s}_l2", op="k5e6") for s in range(4)],
        "edges": [("s0_l0", "s0_l1")] + [("s0_l1", f"s{s}_l2") for s in range(4)],
        "edge_beta": [0.5, 0.1, 0.2, 0.3, 0.4],
        "spec": make_spec(),
        "provenance": "sha",
    }
    values.update(overrides)
    return DecodedArchitecture.model_validate(values)


# ---------------------------------------------------------------------------
# Decoded architecture
# ---------------------------------------------------------------------------


def test_decoded_views() -> None:
    arch = _arch()
    assert (NodeId(0, 0), NodeId(0, 1)) in arch.kept_edges()
    assert arch.chosen_ops()[NodeId(3, 2)] == OperatorConfig(kernel=5, expansion=6)
    assert arch.beta_of()[(NodeId(0, 1), NodeId(2, 2))] == 0.3
    assert arch.in_degrees()[NodeId(0, 1)] == 1
    arch.validate_structure()


def test_json_round_trip() -> None:
    arch = _arch()
    assert DecodedArchitecture.model_validate_json(arch.model_dump_json()) == arch


def test_edge_beta_length_checked() -> None:
    with pytest.raises(ValueError, match="length"):
        _arch(edge_beta=[0.5]).validate_structure()


def test_backward_edge_rejected() -> None:
    base = _arch()
    arch = _arch(edges=[*base.edges, ("s0_l2", "s0_l1")], edge_beta=[*base.edge_beta, 0.1])
    with pytest.raises(ValueError, match="forward in depth"):
        arch.validate_structure()


def test_unfed_node_rejected() -> None:
    arch = _arch(nodes=[*_arch().nodes, NodeEntry(id="s1_l1", op="k3e3")])
    with pytest.raises(ValueError, match="no incoming edge"):
        arch.validate_structure()


def test_stranded_node_rejected() -> None:
    base = _arch()
    arch = _arch(
        nodes=[*base.nodes, NodeEntry(id="s1_l1", op="k3e3")],
        edges=[*base.edges, ("s1_l0", "s1_l1")],
        edge_beta=[*base.edge_beta, 0.9],
    )
    with pytest.raises(ValueError, match="unreachable"):
        arch.validate_structure()


def test_architecture_dot() -> None:
    dot = architecture_dot(_arch())
    assert dot.startswith("digraph decoded {")
    assert '"s0_l0" -> "s0_l1" [label="0.50"];' in dot
    assert "cluster_s3" in dot
    assert "stem" in dot


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


def test_epoch_metrics_row_matches_columns() -> None:
    m = EpochMetrics(
        epoch=3,
        train_a_ce=1.5,
        train_b_ce=1.25,
        l_alpha=0.1,
        l_beta=0.2,
        l_con=0.0,
        tau=2.0,
        val_miou=0.4,
    )
    row = m.row()
    assert len(row) == len(METRIC_COLUMNS)
    assert row[0] == "3"
    assert float(row[-1]) == 0.4


def test_trial_record_bounds() -> None:
    with pytest.raises(ValidationError):
        TrialRecord(trial_id=0, seed=0, s_miou=1.2, t_miou=0.5)


def test_trial_record_wall_time_not_serialized() -> None:
    r = TrialRecord(trial_id=0, seed=0, s_miou=0.5, t_miou=0.5, wall_time=3.0)
    assert "wall_time" not in r.model_dump()
    assert r.wall_time == 3.0


# ---------------------------------------------------------------------------
# Storage helpers
# ---------------------------------------------------------------------------


def test_save_is_byte_stable(tmp_path: Path) -> None:
    a = save_json_model(_arch(), tmp_path / "a.json")
    b = save_json_model(_arch(), tmp_path / "b.json")
    assert a == b
    assert (tmp_path / "a.json").read_text().endswith("}\n")


def test_load_missing_or_invalid(tmp_path: Path) -> None:
    assert load_json_model(DecodedArchitecture, tmp_path / "absent.json") is None
    bad = tmp_path / "bad.json"
    bad.write_text("{}", encoding="utf-8")
    assert load_json_model(DecodedArchitecture, bad) is None
    with pytest.raises(ArtifactError, match="DecodedArchitecture"):
        require_json_model(DecodedArchitecture, bad)


def test_write_resolved_config(tmp_path: Path) -> None:
    path = write_resolved_config(RunConfig(), tmp_path)
    assert path.name == RESOLVED_CONFIG
    assert json.loads(path.read_text())["supernet"]["layers"] == 14


def test_run_log_sink(tmp_path: Path) -> None:
    handler = add_run_log(tmp_path)
    try:
        logger.info("hello from the run")
    finally:
        logger.remove(handler)
    assert "hello from the run" in (tmp_path / RUN_LOG).read_text()
