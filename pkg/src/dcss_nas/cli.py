"""CLI interface for dcss-nas."""

from __future__ import annotations

import asyncio
import functools
import sys
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import TYPE_CHECKING, Any, TypeVar

import click
from loguru import logger
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from dcss_nas import __version__
from dcss_nas.ablation import ABLATION_KINDS
from dcss_nas.artifacts import (
    ARCH_SCHEMA,
    add_run_log,
    architecture_dot,
    load_json_model,
    require_json_model,
    save_json_model,
    save_json_schema,
    write_resolved_config,
)
from dcss_nas.config import RunConfig, load_run_config
from dcss_nas.errors import ArtifactError, ConfigError, DcssError

if TYPE_CHECKING:
    from dcss_nas.data.synthetic import Dataset
    from dcss_nas.models import AblationReport, CorrelationReport, DecodedArchitecture

F = TypeVar("F", bound=Callable[..., Any])

console = Console()

# input resolution for the MAC count printed by `decode`
_SUMMARY_IMAGE_SIZE = 64

_CONFIG_OPTION = click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(path_type=Path, dir_okay=False),
    default=None,
    help="JSON run configuration (defaults apply when omitted)",
)


def _exit_on_error(func: F) -> F:
    """Render pipeline errors in red and exit with their stable exit code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except DcssError as e:
            console.print(f"[red]Error:[/red] {e}")
            sys.exit(e.exit_code)

    return wrapper  # type: ignore[return-value]


@contextmanager
def _run_dir(out_dir: Path, config: RunConfig | None) -> Iterator[Path]:
    """Create ``out_dir``, echo the resolved config and log the run to ``run.log``."""
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactError(f"cannot create {out_dir}: {e}") from e
    handler = add_run_log(out_dir)
    try:
        if config is not None:
            write_resolved_config(config, out_dir)
        yield out_dir
    finally:
        logger.remove(handler)


def _load_dataset(config: RunConfig, data_dir: Path | None) -> Dataset:
    from dcss_nas.data.store import load_dataset
    from dcss_nas.data.synthetic import generate

    if data_dir is None:
        return generate(config.dataset)
    dataset = load_dataset(data_dir)
    if dataset.spec.num_classes != config.supernet.num_classes:
        raise ConfigError(
            f"dataset in {data_dir} has {dataset.spec.num_classes} classes, "
            f"config expects {config.supernet.num_classes}"
        )
    return dataset


@click.group()
@click.version_option(version=__version__)
def cli() -> None:
    """dcss-nas: desk-scale architecture search over a densely connected space."""


@cli.command("gen-data")
@_CONFIG_OPTION
@click.option("--out", "-o", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--force", is_flag=True, help="Overwrite an existing dataset directory")
@_exit_on_error
def gen_data(config_path: Path | None, out_dir: Path, force: bool) -> None:
    """Render the synthetic segmentation dataset into OUT."""
    from dcss_nas.data.store import MANIFEST, save_dataset
    from dcss_nas.data.synthetic import generate

    config = load_run_config(config_path)
    if (out_dir / MANIFEST).exists() and not force:
        raise ArtifactError(f"{out_dir} already holds a dataset; pass --force to overwrite")
    with _run_dir(out_dir, config), console.status("[bold green]Rendering dataset..."):
        manifest = save_dataset(generate(config.dataset), out_dir)

    table = Table(title=f"Dataset (seed {manifest.seed})")
    table.add_column("Split", style="cyan")
    table.add_column("Images", justify="right")
    table.add_column("sha256", style="dim")
    for name, entry in manifest.splits.items():
        table.add_row(name, str(entry.count), entry.sha256[:16])
    console.print(table)


@cli.command()
@_CONFIG_OPTION
@click.option("--data", "-d", "data_dir", type=click.Path(path_type=Path), default=None)
@click.option("--out", "-o", "out_dir", type=click.Path(path_type=Path), default=None)
@click.option("--resume", is_flag=True, help="Continue from the resume checkpoint in OUT")
@_exit_on_error
def search(
    config_path: Path | None, data_dir: Path | None, out_dir: Path | None, resume: bool
) -> None:
    """Run the bilevel architecture search."""
    from dcss_nas.search import run_search

    config = load_run_config(config_path)
    out = out_dir or config.io.out_dir
    dataset = _load_dataset(config, data_dir)
    console.print(
        Panel(
            f"[bold]dcss-nas[/bold] search: L={config.supernet.layers} "
            f"F={config.supernet.width} k={config.supernet.in_degree} "
            f"r={config.supernet.channel_ratio}\n"
            f"{config.search.epochs} epochs | seed {config.search.seed}",
            title="DCSS",
            border_style="blue",
        )
    )
    with _run_dir(out, config), console.status("[bold green]Searching..."):
        outcome = run_search(dataset, config.supernet, config.search, out, resume=resume)

    table = Table(title="Search")
    for column in ("Epoch", "trainA CE", "trainB CE", "tau", "val mIoU"):
        table.add_column(column, justify="right")
    for m in outcome.result.epochs:
        style = "bold green" if m.epoch == outcome.result.best_epoch else None
        table.add_row(
            str(m.epoch),
            f"{m.train_a_ce:.4f}",
            f"{m.train_b_ce:.4f}",
            f"{m.tau:.3f}",
            f"{m.val_miou:.4f}",
            style=style,
        )
    console.print(table)
    console.print(
        f"S-mIoU [bold]{outcome.s_miou:.4f}[/bold] at epoch {outcome.result.best_epoch}; "
        f"checkpoint {out / outcome.result.checkpoint}"
    )


def _display_architecture(decoded: DecodedArchitecture, con: Console) -> None:
    table = Table(title="Decoded architecture")
    table.add_column("Node", style="cyan")
    table.add_column("Operator")
    table.add_column("Inputs")
    sources: dict[str, list[str]] = {}
    for src, dst in decoded.edges:
        sources.setdefault(dst, []).append(src)
    for node in decoded.nodes:
        table.add_row(node.id, node.op, ", ".join(sources.get(node.id, [])))
    con.print(table)
    if decoded.fallback_nodes:
        con.print(
            f"[yellow]Strongest-edge fallback at: {', '.join(decoded.fallback_nodes)}[/yellow]"
        )


@cli.command()
@click.option(
    "--checkpoint",
    "-k",
    "checkpoint_path",
    type=click.Path(path_type=Path, dir_okay=False),
    required=True,
)
@click.option("--out", "-o", "out_path", type=click.Path(path_type=Path), required=True)
@click.option("--strict", is_flag=True, help="Disable the strongest-edge fallback")
@click.option("--dot", "dot_path", type=click.Path(path_type=Path), default=None)
@_exit_on_error
def decode(checkpoint_path: Path, out_path: Path, strict: bool, dot_path: Path | None) -> None:
    """Discretize an architecture checkpoint into JSON."""
    from dcss_nas.complexity import count_flops
    from dcss_nas.decode import build_standalone, decode_checkpoint
    from dcss_nas.models import DecodedArchitecture

    decoded = decode_checkpoint(checkpoint_path, strict=strict)
    save_json_model(decoded, out_path)
    save_json_schema(DecodedArchitecture, out_path.with_name(ARCH_SCHEMA))
    if dot_path is not None:
        try:
            dot_path.write_text(architecture_dot(decoded), encoding="utf-8")
        except OSError as e:
            raise ArtifactError(f"failed to write {dot_path}: {e}") from e
    _display_architecture(decoded, console)
    if not decoded.edges:
        console.print("[yellow]No edge survived decoding; the architecture is empty.[/yellow]")
        return
    try:
        net = build_standalone(decoded)
    except ValueError as e:
        console.print(f"[yellow]Not buildable as a stand-alone network: {e}[/yellow]")
        return
    size = _SUMMARY_IMAGE_SIZE
    flops = count_flops(net, (1, 3, size, size))
    console.print(
        f"{len(decoded.nodes)} nodes, {len(decoded.edges)} edges, "
        f"{net.parameter_count():,} parameters, {flops:,} MACs at {size}x{size}"
    )


@cli.command()
@_CONFIG_OPTION
@click.option(
    "--arch", "-a", "arch_path", type=click.Path(path_type=Path, dir_okay=False), required=True
)
@click.option("--data", "-d", "data_dir", type=click.Path(path_type=Path), default=None)
@click.option("--out", "-o", "out_dir", type=click.Path(path_type=Path), default=None)
@click.option(
    "--weights",
    "-w",
    "weights_path",
    type=click.Path(path_type=Path, dir_okay=False),
    default=None,
    help="Supernet weights checkpoint (required with train.init=inherit)",
)
@_exit_on_error
def train(
    config_path: Path | None,
    arch_path: Path,
    data_dir: Path | None,
    out_dir: Path | None,
    weights_path: Path | None,
) -> None:
    """Retrain a decoded architecture from scratch (or from inherited weights)."""
    from dcss_nas.decode import build_standalone, load_supernet_weights
    from dcss_nas.models import DecodedArchitecture
    from dcss_nas.train import train_standalone

    config = load_run_config(config_path)
    decoded = require_json_model(DecodedArchitecture, arch_path)
    if decoded.spec.num_classes != config.dataset.num_classes:
        raise ConfigError(
            f"{arch_path} predicts {decoded.spec.num_classes} classes, "
            f"dataset has {config.dataset.num_classes}"
        )
    supernet_state = None
    if config.train.init == "inherit":
        if weights_path is None:
            raise ConfigError("train.init=inherit needs --weights")
        supernet_state = load_supernet_weights(weights_path)
    try:
        net = build_standalone(
            decoded, config.train.init, seed=config.train.seed, supernet_state=supernet_state
        )
    except ValueError as e:
        raise ConfigError(f"{arch_path}: {e}") from e
    dataset = _load_dataset(config, data_dir)
    out = out_dir or config.io.out_dir
    with _run_dir(out, config), console.status("[bold green]Retraining..."):
        outcome = train_standalone(net, dataset, config.train, out)
    console.print(
        f"T-mIoU [bold]{outcome.t_miou:.4f}[/bold] at epoch {outcome.result.best_epoch} | "
        f"{outcome.result.parameters:,} parameters | {outcome.result.flops:,} MACs"
    )


def _build_correlation_table(report: CorrelationReport) -> Table:
    table = Table(title=f"Correlation study ({report.n} trials)")
    table.add_column("Trial", style="cyan", justify="right")
    table.add_column("Seed", justify="right")
    table.add_column("S-mIoU", justify="right")
    table.add_column("T-mIoU", justify="right")
    table.add_column("Params", justify="right")
    table.add_column("MACs", justify="right")
    for r in report.records:
        table.add_row(
            str(r.trial_id),
            str(r.seed),
            f"{r.s_miou:.4f}",
            f"{r.t_miou:.4f}",
            f"{r.parameters:,}",
            f"{r.flops:,}",
        )
    for f in report.failed_trials:
        table.add_row(str(f.trial_id), str(f.seed), "[red]FAILED[/red]", "—", "—", "—")
    return table


def _display_correlation(report: CorrelationReport, con: Console) -> None:
    con.print(_build_correlation_table(report))
    rho = f"{report.rho:.4f}" if report.rho is not None else "undefined"
    tau = f"{report.tau:.4f}" if report.tau is not None else "undefined"
    con.print(
        f"\nPearson rho [bold]{rho}[/bold] | Kendall tau [bold]{tau}[/bold] | ties {report.ties}"
    )
    if report.note:
        con.print(f"[yellow]{report.note}[/yellow]")


@cli.command()
@_CONFIG_OPTION
@click.option("--data", "-d", "data_dir", type=click.Path(path_type=Path), default=None)
@click.option("--out", "-o", "out_dir", type=click.Path(path_type=Path), default=None)
@click.option("--jobs", "-j", type=int, default=None, help="Parallel trial processes")
@_exit_on_error
def correlate(
    config_path: Path | None, data_dir: Path | None, out_dir: Path | None, jobs: int | None
) -> None:
    """Search and retrain n_trials architectures; correlate S-mIoU with T-mIoU."""
    from dcss_nas.correlation import run_correlation_study

    config = load_run_config(config_path)
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        config = config.model_copy(
            update={"correlation": config.correlation.model_copy(update={"jobs": jobs})}
        )
    dataset = _load_dataset(config, data_dir)
    out = out_dir or config.io.out_dir
    console.print(
        Panel(
            f"[bold]dcss-nas[/bold] correlation: {config.correlation.n_trials} trials, "
            f"seeds {config.correlation.trial_seeds()}\n"
            f"search {config.search.epochs} epochs | retrain {config.train.epochs} epochs | "
            f"jobs {config.correlation.jobs}",
            title="DCSS",
            border_style="blue",
        )
    )
    with _run_dir(out, config), console.status("[bold green]Running trials..."):
        report = asyncio.run(
            run_correlation_study(
                dataset, config.supernet, config.search, config.train, config.correlation, out
            )
        )
    _display_correlation(report, console)


def _display_ablation(report: AblationReport, con: Console) -> None:
    table = Table(title=f"Ablation: {report.kind}")
    table.add_column("Variant", style="cyan")
    table.add_column("S-mIoU", justify="right")
    table.add_column("T-mIoU", justify="right")
    table.add_column("Params", justify="right")
    table.add_column("MACs", justify="right")
    for row in report.rows:
        table.add_row(
            row.label,
            f"{row.s_miou:.4f}",
            f"{row.t_miou:.4f}",
            f"{row.parameters:,}",
            f"{row.flops:,}",
        )
    for failure in report.failed:
        label, _, _ = failure.partition(":")
        table.add_row(label, "[red]FAILED[/red]", "—", "—", "—")
    con.print(table)


@cli.command()
@_CONFIG_OPTION
@click.option(
    "--kind",
    "-k",
    type=click.Choice(ABLATION_KINDS),
    required=True,
)
@click.option("--data", "-d", "data_dir", type=click.Path(path_type=Path), default=None)
@click.option("--out", "-o", "out_dir", type=click.Path(path_type=Path), default=None)
@_exit_on_error
def ablate(
    config_path: Path | None, kind: str, data_dir: Path | None, out_dir: Path | None
) -> None:
    """Search, decode and retrain every variant of one ablation sweep."""
    from dcss_nas.ablation import run_ablation

    config = load_run_config(config_path)
    dataset = _load_dataset(config, data_dir)
    out = out_dir or config.io.out_dir
    with _run_dir(out, config), console.status(f"[bold green]Running {kind} ablation..."):
        report = run_ablation(
            dataset,
            config.supernet,
            config.search,
            config.train,
            kind,  # type: ignore[arg-type]
            out,
        )
    _display_ablation(report, console)


@cli.command()
@click.option("--in", "in_dir", type=click.Path(path_type=Path), required=True)
@_exit_on_error
def report(in_dir: Path) -> None:
    """Render the correlation or ablation report found in IN."""
    from dcss_nas.ablation import REPORT_FILE as ABLATION_FILE
    from dcss_nas.correlation import REPORT_FILE
    from dcss_nas.models import AblationReport, CorrelationReport

    if not in_dir.is_dir():
        raise ConfigError(f"no such directory: {in_dir}")
    found = False
    correlation = load_json_model(CorrelationReport, in_dir / REPORT_FILE)
    if correlation is not None:
        _display_correlation(correlation, console)
        found = True
    ablation = load_json_model(AblationReport, in_dir / ABLATION_FILE)
    if ablation is not None:
        _display_ablation(ablation, console)
        found = True
    if not found:
        raise ConfigError(f"{in_dir} holds neither {REPORT_FILE} nor {ABLATION_FILE}")
