"""Ablation sweeps: labelled variants of the search space or the search protocol."""

from __future__ import annotations

import itertools
from collections.abc import Iterator
from pathlib import Path
from typing import TYPE_CHECKING, Literal

from loguru import logger

from dcss_nas.artifacts import save_json_model
from dcss_nas.errors import DcssError
from dcss_nas.models import AblationReport, AblationRow
from dcss_nas.pipeline import run_pipeline

if TYPE_CHECKING:
    from dcss_nas.config import SearchConfig, SupernetSpec, TrainConfig
    from dcss_nas.data.synthetic import Dataset

AblationKind = Literal["regularizers", "sampling-ratio", "depth", "in-degree", "search-budget"]
ABLATION_KINDS: tuple[AblationKind, ...] = (
    "regularizers",
    "sampling-ratio",
    "depth",
    "in-degree",
    "search-budget",
)
REPORT_FILE = "ablation.json"

SAMPLING_RATIOS = (1.0, 0.5, 0.25, 0.125, 0.0625)
DEPTHS = (8, 14)
IN_DEGREES = (1, 2, 3, 4, 5)
# (epoch multiplier, regularizers on)
SEARCH_BUDGETS = ((1, True), (1, False), (2, False), (3, False), (4, False))
_REGULARIZERS = (("con", "lambda_con"), ("beta", "lambda_beta"), ("alpha", "lambda_alpha"))


def variants(
    kind: AblationKind, spec: SupernetSpec, search: SearchConfig
) -> Iterator[tuple[str, SupernetSpec, SearchConfig]]:
    """Labelled (spec, search config) pairs for one sweep."""
    if kind == "regularizers":
        for mask in itertools.product((True, False), repeat=len(_REGULARIZERS)):
            update = {
                attr: (getattr(search, attr) if on else 0.0)
                for (_, attr), on in zip(_REGULARIZERS, mask, strict=True)
            }
            on_names = [name for (name, _), on in zip(_REGULARIZERS, mask, strict=True) if on]
            label = "+".join(f"L_{n}" for n in on_names) or "none"
            yield label, spec, search.model_copy(update=update)
    elif kind == "sampling-ratio":
        for r in SAMPLING_RATIOS:
            yield f"r={r:g}", spec.model_copy(update={"channel_ratio": r}), search
    elif kind == "depth":
        for layers in DEPTHS:
            for r in SAMPLING_RATIOS:
                shape = {"layers": layers, "channel_ratio": r}
                yield f"L={layers},r={r:g}", spec.model_copy(update=shape), search
    elif kind == "in-degree":
        for k in IN_DEGREES:
            yield f"k={k}", spec.model_copy(update={"in_degree": k}), search
    elif kind == "search-budget":
        for factor, regularized in SEARCH_BUDGETS:
            budget: dict[str, object] = {"epochs": search.epochs * factor}
            if not regularized:
                budget.update({attr: 0.0 for _, attr in _REGULARIZERS})
            label = f"budget={factor}x" + ("+regs" if regularized else "")
            yield label, spec, search.model_copy(update=budget)
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")


def run_ablation(
    dataset: Dataset,
    spec: SupernetSpec,
    search: SearchConfig,
    train: TrainConfig,
    kind: AblationKind,
    out_dir: Path | None = None,
) -> AblationReport:
    """Search, decode and retrain every variant; failures are listed, not raised."""
    rows: list[AblationRow] = []
    failed: list[str] = []
    for index, (label, v_spec, v_search) in enumerate(variants(kind, spec, search)):
        logger.info(f"Ablation {kind}: variant {label}")
        directory = out_dir / f"variant_{index:02d}" if out_dir is not None else None
        try:
            run = run_pipeline(dataset, v_spec, v_search, train, directory)
        except (DcssError, ValueError) as e:
            logger.warning(f"Ablation variant {label} failed: {e}")
            failed.append(f"{label}: {e}")
            continue
        rows.append(
            AblationRow(
                label=label,
                s_miou=run.s_miou,
                t_miou=run.t_miou,
                parameters=run.parameters,
                flops=run.flops,
            )
        )
    report = AblationReport(kind=kind, rows=rows, failed=failed)
    if out_dir is not None:
        save_json_model(report, out_dir / REPORT_FILE)
    return report
