"""Result-file storage: JSON documents, CSV tables, DOT graphs and run logs.

Documents are written with sorted keys and a trailing newline so identical
results hash identically. Timestamps never enter these files; they live in
the loguru ``run.log`` sink added per output directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import TypeVar

from loguru import logger
from pydantic import BaseModel

from dcss_nas.config import RunConfig
from dcss_nas.errors import ArtifactError
from dcss_nas.models import DecodedArchitecture

M = TypeVar("M", bound=BaseModel)

RESOLVED_CONFIG = "config.resolved.json"
RUN_LOG = "run.log"
ARCH_SCHEMA = "arch.schema.json"


def dump_json_model(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def save_json_model(model: BaseModel, path: Path) -> str:
    """Write ``model`` as JSON and return the sha256 of the bytes written."""
    text = dump_json_model(model)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"failed to write {path}: {e}") from e
    logger.debug(f"Saved {type(model).__name__}: {path}")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_json_schema(cls: type[BaseModel], path: Path) -> None:
    """Write the JSON Schema of ``cls`` so consumers can validate its documents."""
    text = json.dumps(cls.model_json_schema(), indent=2, sort_keys=True) + "\n"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"failed to write {path}: {e}") from e


def load_json_model(cls: type[M], path: Path) -> M | None:
    """Load a document, or ``None`` (with a warning) if it is missing or invalid."""
    if not path.exists():
        return None
    try:
        return cls.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        logger.warning(f"Failed to load {cls.__name__} from {path}: {e}")
        return None


def require_json_model(cls: type[M], path: Path) -> M:
    model = load_json_model(cls, path)
    if model is None:
        raise ArtifactError(f"missing or invalid {cls.__name__} document: {path}")
    return model


def write_resolved_config(config: RunConfig, out_dir: Path) -> Path:
    path = out_dir / RESOLVED_CONFIG
    save_json_model(config, path)
    return path


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise ArtifactError(f"failed to write {path}: {e}") from e


def architecture_dot(arch: DecodedArchitecture) -> str:
    """Graphviz rendering: one cluster per scale, edges labeled with their beta."""
    ops = {n.id: n.op for n in arch.nodes}
    lines = ["digraph decoded {", "  rankdir=LR;", "  node [shape=box, fontsize=10];"]
    stems = sorted({s for s, _ in arch.edges if s.endswith("_l0")})
    for scale in range(4):
        members = [n for n in [*stems, *sorted(ops)] if n.startswith(f"s{scale}_")]
        if not members:
            continue
        lines.append(f"  subgraph cluster_s{scale} {{")
        lines.append(f'    label="scale 1/{4 * 2**scale}";')
        for name in members:
            label = f"{name}\\n{ops[name]}" if name in ops else f"{name}\\nstem"
            lines.append(f'    "{name}" [label="{label}"];')
        lines.append("  }")
    for (src, dst), beta in zip(arch.edges, arch.edge_beta, strict=True):
        lines.append(f'  "{src}" -> "{dst}" [label="{beta:.2f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def add_run_log(out_dir: Path) -> int:
    """Attach a ``run.log`` sink in ``out_dir``; returns the loguru handler id."""
    out_dir.mkdir(parents=True, exist_ok=True)
    return logger.add(
        out_dir / RUN_LOG,
        level="DEBUG",
        format="{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{line} | {message}",
        enqueue=False,
    )
