"""Searching-vs-training correlation study.

Each trial searches with its own seed, decodes the best architecture and
retrains it; the S-mIoU / T-mIoU pairs of the completed trials are
summarized by Pearson's rho and Kendall's tau-a. Trials that raise are
recorded as failed and left out of both statistics.
"""

from __future__ import annotations

import asyncio
import math
import time
from collections.abc import Sequence
from concurrent.futures import Executor, ProcessPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger

from dcss_nas.artifacts import save_json_model, write_csv
from dcss_nas.errors import DegenerateSampleError
from dcss_nas.models import CorrelationReport, FailedTrial, TrialRecord
from dcss_nas.pipeline import ARCH_FILE, run_pipeline

if TYPE_CHECKING:
    from dcss_nas.config import CorrelationConfig, SearchConfig, SupernetSpec, TrainConfig
    from dcss_nas.data.synthetic import Dataset

REPORT_FILE = "report.json"
SCATTER_CSV = "scatter.csv"
TRIALS_CSV = "trials.csv"
TRIAL_COLUMNS = ("trial_id", "seed", "s_miou", "t_miou", "parameters", "flops", "arch_path")


def _pair(xs: Sequence[float], ys: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"samples must be equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("at least 2 observations are required")
    return x, y


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample correlation from running means and co-moments (single pass)."""
    x, y = _pair(xs, ys)
    mean_x = mean_y = 0.0
    m2_x = m2_y = c_xy = 0.0
    for n, (a, b) in enumerate(zip(x.tolist(), y.tolist(), strict=True), start=1):
        dx = a - mean_x
        mean_x += dx / n
        dy = b - mean_y
        mean_y += dy / n
        m2_x += dx * (a - mean_x)
        m2_y += dy * (b - mean_y)
        c_xy += dx * (b - mean_y)
    if m2_x <= 0.0 or m2_y <= 0.0:
        raise DegenerateSampleError("degenerate sample: zero variance")
    rho = c_xy / math.sqrt(m2_x * m2_y)
    return max(-1.0, min(1.0, rho))


def _pair_signs(xs: Sequence[float], ys: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x, y = _pair(xs, ys)
    i, j = np.triu_indices(len(x), k=1)
    return np.sign(x[j] - x[i]), np.sign(y[j] - y[i])


def kendall(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Tau-a: (concordant - discordant) / C(n, 2); tied pairs count as neither."""
    sx, sy = _pair_signs(xs, ys)
    return float(np.sum(sx * sy) / len(sx))


def count_ties(xs: Sequence[float], ys: Sequence[float]) -> int:
    """Pairs tied in x or in y."""
    sx, sy = _pair_signs(xs, ys)
    return int(np.count_nonzero((sx == 0) | (sy == 0)))


def build_report(
    records: Sequence[TrialRecord], failed: Sequence[FailedTrial] = ()
) -> CorrelationReport:
    records = sorted(records, key=lambda r: r.trial_id)
    failed = sorted(failed, key=lambda f: f.trial_id)
    notes: list[str] = []
    rho = tau = None
    ties = 0
    if len(records) < 2:
        notes.append(f"only {len(records)} completed trial(s); correlations need at least 2")
    else:
        xs = [r.s_miou for r in records]
        ys = [r.t_miou for r in records]
        tau = kendall(xs, ys)
        ties = count_ties(xs, ys)
        try:
            rho = pearson(xs, ys)
        except DegenerateSampleError as e:
            notes.append(f"{e}; pearson rho undefined")
    if failed:
        notes.append(f"{len(failed)} failed trial(s) excluded")
    return CorrelationReport(
        n=len(records),
        rho=rho,
        tau=tau,
        ties=ties,
        records=list(records),
        failed_trials=list(failed),
        note="; ".join(notes) or None,
    )


def trial_dir(out_dir: Path, trial_id: int) -> Path:
    return out_dir / "trials" / f"trial_{trial_id:03d}"


def run_trial(
    trial_id: int,
    seed: int,
    dataset: Dataset,
    spec: SupernetSpec,
    search: SearchConfig,
    train: TrainConfig,
    out_dir: Path | None = None,
) -> TrialRecord:
    """One search -> decode -> retrain run with every seed set to ``seed``."""
    started = time.perf_counter()
    directory = trial_dir(out_dir, trial_id) if out_dir is not None else None
    run = run_pipeline(
        dataset,
        spec,
        search.model_copy(update={"seed": seed}),
        train.model_copy(update={"seed": seed}),
        directory,
    )
    arch_path = ""
    if directory is not None and out_dir is not None:
        arch_path = (directory / ARCH_FILE).relative_to(out_dir).as_posix()
    return TrialRecord(
        trial_id=trial_id,
        seed=seed,
        s_miou=run.s_miou,
        t_miou=run.t_miou,
        arch_path=arch_path,
        parameters=run.parameters,
        flops=run.flops,
        wall_time=time.perf_counter() - started,
    )


def _trial_row(r: TrialRecord) -> list[object]:
    return [r.trial_id, r.seed, repr(r.s_miou), repr(r.t_miou), r.parameters, r.flops, r.arch_path]


def write_report(report: CorrelationReport, out_dir: Path) -> None:
    save_json_model(report, out_dir / REPORT_FILE)
    write_csv(
        out_dir / SCATTER_CSV,
        ("s_miou", "t_miou", "trial_id"),
        [[repr(r.s_miou), repr(r.t_miou), str(r.trial_id)] for r in report.records],
    )
    write_csv(
        out_dir / TRIALS_CSV,
        TRIAL_COLUMNS,
        [_trial_row(r) for r in report.records],
    )


async def run_correlation_study(
    dataset: Dataset,
    spec: SupernetSpec,
    search: SearchConfig,
    train: TrainConfig,
    correlation: CorrelationConfig,
    out_dir: Path | None = None,
) -> CorrelationReport:
    """Run every trial, at most ``correlation.jobs`` at a time, and aggregate the report.

    With ``jobs > 1`` trials run in worker processes; otherwise in a single
    worker thread, one after another.
    """
    seeds = correlation.trial_seeds()
    sem = asyncio.Semaphore(correlation.jobs)
    loop = asyncio.get_running_loop()
    pool: Executor | None = None
    if correlation.jobs > 1:
        pool = ProcessPoolExecutor(max_workers=correlation.jobs)

    async def _run_one(trial_id: int, seed: int) -> TrialRecord | FailedTrial:
        async with sem:
            logger.info(f"Trial {trial_id} (seed {seed}) started")
            try:
                record = await loop.run_in_executor(
                    pool, run_trial, trial_id, seed, dataset, spec, search, train, out_dir
                )
            except Exception as e:
                logger.warning(f"Trial {trial_id} (seed {seed}) failed: {e}")
                return FailedTrial(trial_id=trial_id, seed=seed, error=f"{type(e).__name__}: {e}")
            logger.info(
                f"Trial {trial_id}: S-mIoU={record.s_miou:.4f} T-mIoU={record.t_miou:.4f} "
                f"({record.wall_time:.1f}s)"
            )
            return record

    try:
        outcomes = await asyncio.gather(*[_run_one(i, s) for i, s in enumerate(seeds)])
    finally:
        if pool is not None:
            pool.shutdown()

    records = [o for o in outcomes if isinstance(o, TrialRecord)]
    failed = [o for o in outcomes if isinstance(o, FailedTrial)]
    report = build_report(records, failed)
    if out_dir is not None:
        write_report(report, out_dir)
    if report.rho is not None and report.tau is not None:
        logger.info(
            f"Correlation over {report.n} trials: rho={report.rho:.4f} tau={report.tau:.4f}"
        )
    else:
        logger.warning(f"Correlation report incomplete: {report.note}")
    return report
