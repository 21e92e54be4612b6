"""Binary tensor checkpoints.

Layout (all integers little-endian u64)::

    MAGIC | len(meta) | meta JSON | { len(header) | header JSON | f8 data }*

``meta`` is an arbitrary JSON object (sorted keys) describing what the file
holds; each header is ``{"name", "shape", "dtype": "<f8"}``. Files written
from identical tensors and metadata are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from loguru import logger

from dcss_nas.errors import ArtifactError

if TYPE_CHECKING:
    from numpy.typing import NDArray

MAGIC = b"DCSSCKP1"
DTYPE = "<f8"
_U64 = struct.Struct("<Q")


def _json_bytes(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(tensors: Mapping[str, NDArray[Any]], meta: Mapping[str, Any] | None = None) -> bytes:
    """Serialize named arrays in the order given by ``tensors``."""
    chunks = [MAGIC]
    meta_bytes = _json_bytes(dict(meta or {}))
    chunks += [_U64.pack(len(meta_bytes)), meta_bytes]
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=DTYPE)
        header = _json_bytes({"name": name, "shape": list(data.shape), "dtype": DTYPE})
        chunks += [_U64.pack(len(header)), header, data.tobytes()]
    return b"".join(chunks)


def decode(
    blob: bytes, *, source: str = "<bytes>"
) -> tuple[dict[str, Any], dict[str, NDArray[np.float64]]]:
    """Inverse of :func:`encode`; raises :class:`ArtifactError` on any corruption."""
    view = memoryview(blob)
    if bytes(view[: len(MAGIC)]) != MAGIC:
        raise ArtifactError(f"{source}: not a dcss checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArtifactError(f"{source}: truncated checkpoint at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def take_json() -> Any:
        (length,) = _U64.unpack(take(_U64.size))
        try:
            return json.loads(bytes(take(length)))
        except json.JSONDecodeError as e:
            raise ArtifactError(f"{source}: malformed header JSON: {e}") from e

    meta = take_json()
    tensors: dict[str, NDArray[np.float64]] = {}
    while pos < len(view):
        header = take_json()
        if header.get("dtype") != DTYPE:
            raise ArtifactError(f"{source}: unsupported dtype {header.get('dtype')!r}")
        shape = tuple(int(d) for d in header["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        raw = take(count * 8)
        tensors[header["name"]] = np.frombuffer(raw, dtype=DTYPE).reshape(shape).astype(np.float64)
    return meta, tensors


def save(
    path: Path, tensors: Mapping[str, NDArray[Any]], meta: Mapping[str, Any] | None = None
) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    blob = encode(tensors, meta)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise ArtifactError(f"failed to write checkpoint {path}: {e}") from e
    digest = hashlib.sha256(blob).hexdigest()
    logger.debug(f"Checkpoint saved: {path} ({len(tensors)} tensors, sha256={digest[:12]})")
    return digest


def load(path: Path) -> tuple[dict[str, Any], dict[str, NDArray[np.float64]]]:
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ArtifactError(f"failed to read checkpoint {path}: {e}") from e
    return decode(blob, source=str(path))


def file_sha256(path: Path) -> str:
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as e:
        raise ArtifactError(f"failed to hash {path}: {e}") from e
