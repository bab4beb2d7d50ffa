"""Command-line interface for stagedpgd."""

import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

import typer
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from .core.checkpoint import CheckpointError
from .core.config import ConfigError, RunConfig, load_config
from .core.dataset import DatasetError
from .core.metrics import EvaluationError, format_asr
from .core.pipeline import (
    AttackRunSummary,
    ReportSummary,
    cmd_attack,
    cmd_generate,
    cmd_report,
    cmd_train,
    run_all,
)
from .core.report import ReportError
from .core.training import GateError, TrainingSummary
from .core.workspace import OverwriteRefusedError, WorkspaceError

# Create Typer app
app = typer.Typer(
    name="stagedpgd",
    help="Staged two-model PGD attacks on a toy vision-language testbed",
    add_completion=False,
)

# Rich console for pretty output
console = Console()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_GATE = 3
EXIT_PARTIAL = 4

CONFIG_OPTION = typer.Option(None, "--config", "-c", help="YAML run configuration (default: built-in)")
SEED_OPTION = typer.Option(None, "--seed", help="Master seed (overrides the configuration)")
OUT_OPTION = typer.Option(None, "--out", "-o", help="Run directory (overrides output_dir)")
WORKERS_OPTION = typer.Option(None, "--workers", "-w", min=1, help="Per-sample worker threads")
RESUME_OPTION = typer.Option(False, "--resume", help="Skip samples that already have results")
OVERWRITE_OPTION = typer.Option(False, "--overwrite", help="Replace an existing dataset")
VERBOSE_OPTION = typer.Option(False, "--verbose", "-v", help="Enable verbose output")


def setup_logging(verbose: bool = False):
    """Configure logging based on verbosity."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s")


def _classify(error: Exception):
    """Machine error code and exit status of an exception."""
    if isinstance(error, (ConfigError, DatasetError, OverwriteRefusedError)):
        return "config", EXIT_CONFIG
    if isinstance(error, GateError):
        return "gate", EXIT_GATE
    if isinstance(error, WorkspaceError):
        return "missing_artifact", EXIT_UNEXPECTED
    if isinstance(error, CheckpointError):
        return "checkpoint", EXIT_UNEXPECTED
    if isinstance(error, (ReportError, EvaluationError)):
        return "report", EXIT_UNEXPECTED
    return "unexpected", EXIT_UNEXPECTED


def fail(error: Exception, verbose: bool = False):
    """Print a machine-parsable line on stderr plus human text, then exit."""
    code, exit_code = _classify(error)
    message = " ".join(str(error).split())
    typer.echo(f"stagedpgd: error={code} exit={exit_code} {message}", err=True)
    console.print(f"[bold red]Error:[/bold red] {escape(str(error))}")
    if isinstance(error, GateError) and error.summary is not None:
        print_training([error.summary])
    if verbose:
        console.print(traceback.format_exc())
    raise typer.Exit(exit_code)


def _config(config: Optional[Path], seed: Optional[int], out: Optional[Path]) -> RunConfig:
    return load_config(config).with_overrides(seed=seed, output_dir=str(out) if out else None)


def print_training(summaries: List[TrainingSummary]):
    table = Table(show_header=True, header_style="bold cyan")
    table.add_column("Model", style="green")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    table.add_column("Gate", justify="right")
    table.add_column("Status")
    for s in summaries:
        status = "[green]pass[/green]" if s.passed else "[red]fail[/red]"
        gate = "-" if s.gate is None else f"{s.gate:.2f}"
        table.add_row(s.name, s.metric_name, f"{s.metric_value:.3f}", gate, status)
    console.print(table)


def _fmt(value, spec: str) -> str:
    return "-" if value is None else format(value, spec)


def _fmt_asr(value) -> str:
    return "-" if value is None else format_asr(value)


def print_report(summary: ReportSummary):
    for name in ("table1", "table2", "table3"):
        rows = summary.report.table(name)
        if not rows:
            continue
        table = Table(title=name, show_header=True, header_style="bold cyan")
        for column in ("Row", "Head", "Dense clean", "Dense adv", "Dense ASR %",
                       "R@1 clean", "R@1 adv", "R@1 ASR %"):
            table.add_column(column, justify="left" if column in ("Row", "Head") else "right")
        for row in rows:
            table.add_row(
                row.label,
                row.head_kind,
                _fmt(row.dense_clean, ".3f"),
                _fmt(row.dense_adv, ".3f"),
                _fmt_asr(row.dense_asr),
                _fmt(row.recall_clean, ".3f"),
                _fmt(row.recall_adv, ".3f"),
                _fmt_asr(row.recall_asr),
            )
        console.print(table)

    for check in summary.trends:
        mark = {True: "[green]✓[/green]", False: "[red]✗[/red]", None: "[yellow]?[/yellow]"}
        console.print(f"  {mark[check['passed']]} {check['criterion']} ({check['head_kind']})")

    if summary.missing:
        console.print(f"[yellow]{len(summary.missing)} attack results missing; report has gaps[/yellow]")
    console.print(f"\n[bold green]✓ Report written:[/bold green] {summary.paths['report'].parent}")


def print_attack(summary: AttackRunSummary):
    console.print(
        f"[bold]{summary.runs}[/bold] attacks for [bold]{summary.rows}[/bold] rows: "
        f"{summary.computed} computed, {summary.skipped} skipped, "
        f"{len(summary.failed)} failed, {len(summary.partial)} partial"
    )
    for key in summary.failed[:10]:
        console.print(f"  [red]failed[/red] {key}")
    for key in summary.partial[:10]:
        console.print(f"  [yellow]partial[/yellow] {key}")


def _exit_for_attack(summary: AttackRunSummary):
    if not summary.clean:
        typer.echo(
            f"stagedpgd: error=partial exit={EXIT_PARTIAL} "
            f"{len(summary.failed)} failed, {len(summary.partial)} partial attack results",
            err=True,
        )
        raise typer.Exit(EXIT_PARTIAL)


@app.command()
def generate(
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    overwrite: bool = OVERWRITE_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    """
    Generate the synthetic shapes dataset.
    """
    setup_logging(verbose)

    try:
        run_config = _config(config, seed, out)
        console.print("[bold]Generating dataset...[/bold]")
        summary = cmd_generate(run_config, overwrite=overwrite)

        counts = ", ".join(f"{n} {split}" for split, n in summary.counts.items())
        console.print(f"\n[bold green]✓ Dataset written:[/bold green] {summary.path}")
        console.print(f"  {counts}")
        console.print(f"  checksum {summary.checksum}")

    except typer.Exit:
        raise
    except Exception as e:
        fail(e, verbose)


@app.command()
def train(
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    """
    Train the contrastive model and its dense derivatives, enforcing quality gates.
    """
    setup_logging(verbose)

    try:
        run_config = _config(config, seed, out)
        console.print("[bold]Training models...[/bold]")
        summaries = cmd_train(run_config)
        print_training(summaries)
        console.print("\n[bold green]✓ All gates passed[/bold green]")

    except typer.Exit:
        raise
    except Exception as e:
        fail(e, verbose)


@app.command()
def attack(
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    workers: Optional[int] = WORKERS_OPTION,
    resume: bool = RESUME_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    """
    Run every configured attack row on the test samples.
    """
    setup_logging(verbose)

    try:
        run_config = _config(config, seed, out)
        summary = cmd_attack(run_config, workers=workers, resume=resume)
        print_attack(summary)
        _exit_for_attack(summary)

    except typer.Exit:
        raise
    except Exception as e:
        fail(e, verbose)


@app.command()
def report(
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    """
    Evaluate stored attacks and write the table replicas, JSON report and triptychs.
    """
    setup_logging(verbose)

    try:
        run_config = _config(config, seed, out)
        print_report(cmd_report(run_config))

    except typer.Exit:
        raise
    except Exception as e:
        fail(e, verbose)


@app.command("all")
def run_everything(
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    workers: Optional[int] = WORKERS_OPTION,
    overwrite: bool = OVERWRITE_OPTION,
    resume: bool = RESUME_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    """
    Generate, train, attack and report in one run.
    """
    setup_logging(verbose)

    try:
        run_config = _config(config, seed, out)
        attack_summary, report_summary = run_all(
            run_config, overwrite=overwrite, workers=workers, resume=resume
        )
        print_attack(attack_summary)
        print_report(report_summary)
        _exit_for_attack(attack_summary)

    except typer.Exit:
        raise
    except Exception as e:
        fail(e, verbose)


@app.callback()
def main():
    """
    stagedpgd - staged two-model PGD attacks and cross-task transfer experiments.
    """
    pass


def cli():
    """Entry point for the CLI."""
    try:
        app()
    except KeyboardInterrupt:
        console.print("\n[yellow]Interrupted by user[/yellow]")
        sys.exit(130)


if __name__ == "__main__":
    cli()
