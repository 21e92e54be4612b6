"""Binary split files and the dataset manifest.

A split file is ``MAGIC | u64 len(header) | header JSON | images | labels``
where images are ``[n, 3, H, W]`` bytes (pixel * 255) and labels ``[n, H, W]``
bytes. ``manifest.json`` lists every split with its count and sha256.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from loguru import logger

from dcss_nas.artifacts import require_json_model, save_json_model
from dcss_nas.config import DatasetSpec
from dcss_nas.data.synthetic import SPLIT_NAMES, Dataset, Split
from dcss_nas.errors import ArtifactError
from dcss_nas.models import DatasetManifest, SplitEntry

MAGIC = b"DCSSDAT1"
MANIFEST = "manifest.json"
_U64 = struct.Struct("<Q")


def encode_split(split: Split, spec: DatasetSpec) -> bytes:
    n, _, h, w = split.images.shape
    header = json.dumps(
        {
            "spec": spec.model_dump(mode="json"),
            "seed": spec.seed,
            "split": split.name,
            "count": n,
            "height": h,
            "width": w,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    pixels = np.round(split.images * 255.0).astype(np.uint8)
    labels = split.labels.astype(np.uint8).tobytes()
    return b"".join([MAGIC, _U64.pack(len(header)), header, pixels.tobytes(), labels])


def decode_split(blob: bytes, *, source: str = "<bytes>") -> tuple[dict[str, object], Split]:
    if blob[: len(MAGIC)] != MAGIC:
        raise ArtifactError(f"{source}: not a dcss split file (bad magic)")
    pos = len(MAGIC)
    (length,) = _U64.unpack_from(blob, pos)
    pos += _U64.size
    try:
        header = json.loads(blob[pos : pos + length])
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{source}: malformed header: {e}") from e
    pos += length
    n, h, w = int(header["count"]), int(header["height"]), int(header["width"])
    n_pix, n_lab = n * 3 * h * w, n * h * w
    if len(blob) != pos + n_pix + n_lab:
        raise ArtifactError(f"{source}: expected {pos + n_pix + n_lab} bytes, got {len(blob)}")
    images = np.frombuffer(blob, np.uint8, n_pix, pos).reshape(n, 3, h, w) / 255.0
    labels = np.frombuffer(blob, np.uint8, n_lab, pos + n_pix).reshape(n, h, w).copy()
    return header, Split(str(header["split"]), images, labels)


def save_dataset(dataset: Dataset, out_dir: Path) -> DatasetManifest:
    entries: dict[str, SplitEntry] = {}
    for name, split in dataset.splits.items():
        blob = encode_split(split, dataset.spec)
        path = out_dir / f"{name}.bin"
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            path.write_bytes(blob)
        except OSError as e:
            raise ArtifactError(f"failed to write {path}: {e}") from e
        entries[name] = SplitEntry(
            file=path.name, count=len(split), sha256=hashlib.sha256(blob).hexdigest()
        )
    manifest = DatasetManifest(spec=dataset.spec, seed=dataset.spec.seed, splits=entries)
    save_json_model(manifest, out_dir / MANIFEST)
    logger.info(f"Dataset written to {out_dir}")
    return manifest


def load_dataset(data_dir: Path) -> Dataset:
    """Read a dataset directory, verifying every split against the manifest hash."""
    manifest = require_json_model(DatasetManifest, data_dir / MANIFEST)
    splits: list[Split] = []
    for name in SPLIT_NAMES:
        entry = manifest.splits.get(name)
        if entry is None:
            raise ArtifactError(f"{data_dir}: manifest lists no {name} split")
        path = data_dir / entry.file
        try:
            blob = path.read_bytes()
        except OSError as e:
            raise ArtifactError(f"failed to read {path}: {e}") from e
        if hashlib.sha256(blob).hexdigest() != entry.sha256:
            raise ArtifactError(f"{path}: sha256 does not match the manifest")
        _, split = decode_split(blob, source=str(path))
        if len(split) == 0:
            raise ArtifactError(f"{path}: empty split")
        splits.append(split)
    return Dataset(manifest.spec, *splits)
