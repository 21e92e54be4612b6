"""Tests for the binary tensor checkpoint codec."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dcss_nas.errors import ArtifactError
from dcss_nas.tensor import checkpoint


def _tensors() -> dict[str, np.ndarray]:
    rng = np.random.default_rng(0)
    return {"conv.weight": rng.normal(size=(4, 3, 3, 3)), "bn.running_var": np.ones(4)}


def test_round_trip_preserves_values_and_order(tmp_path: Path) -> None:
    tensors = _tensors()
    path = tmp_path / "ckpt" / "w.ckpt"
    digest = checkpoint.save(path, tensors, {"kind": "test", "epoch": 3})
    meta, loaded = checkpoint.load(path)
    assert meta == {"kind": "test", "epoch": 3}
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        np.testing.assert_array_equal(loaded[name], value)
    assert digest == checkpoint.file_sha256(path)


def test_identical_inputs_give_identical_bytes() -> None:
    a = checkpoint.encode(_tensors(), {"b": 1, "a": 2})
    b = checkpoint.encode(_tensors(), {"a": 2, "b": 1})
    assert a == b


def test_scalar_and_empty_tensors() -> None:
    meta, loaded = checkpoint.decode(checkpoint.encode({"s": np.array(2.5), "e": np.zeros(0)}))
    assert meta == {}
    assert loaded["s"].shape == () and loaded["s"] == 2.5
    assert loaded["e"].shape == (0,)


def test_bad_magic() -> None:
    with pytest.raises(ArtifactError, match="bad magic"):
        checkpoint.decode(b"NOTACKPT" + bytes(16))


@pytest.mark.parametrize("cut", [9, 20, -1])
def test_truncation_detected(cut: int) -> None:
    blob = checkpoint.encode(_tensors(), {"kind": "test"})
    with pytest.raises(ArtifactError):
        checkpoint.decode(blob[:cut])


def test_malformed_header() -> None:
    blob = checkpoint.MAGIC + (5).to_bytes(8, "little") + b"{oops"
    with pytest.raises(ArtifactError, match="malformed"):
        checkpoint.decode(blob)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ArtifactError, match="failed to read"):
        checkpoint.load(tmp_path / "absent.ckpt")
