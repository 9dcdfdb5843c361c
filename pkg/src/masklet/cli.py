"""
Command-line interface for masklet experiments.

This module provides a Typer-based CLI that trains a task stream from a
preset (optionally refined by a config file and ``--key value`` flags),
evaluates saved checkpoints with or without task identity, and lists the
shipped presets.
"""

from dataclasses import asdict
import logging
import os
from pathlib import Path
from typing import Annotated
from typing import Any
from typing import Final

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn
from rich.progress import MofNCompleteColumn
from rich.progress import Progress
from rich.progress import TaskID
from rich.progress import TextColumn
from rich.progress import TimeElapsedColumn
from rich.table import Table
import typer

from masklet.checkpoint import read_checkpoint
from masklet.checkpoint import write_checkpoint
from masklet.checkpoint import write_run_manifest
from masklet.config import dump_config
from masklet.config import list_presets
from masklet.config import resolve_config
from masklet.datasets import build_tasks
from masklet.datasets import load_mnist
from masklet.exceptions import ConfigError
from masklet.exceptions import DataError
from masklet.exceptions import DivergenceError
from masklet.exceptions import MaskletError
from masklet.inference import evaluate_task_agnostic
from masklet.metrics import backward_transfer
from masklet.metrics import drift_report
from masklet.metrics import fecam_protocol_accuracy
from masklet.metrics import mean_final_accuracy
from masklet.trainer import LossRecord
from masklet.trainer import TrainedState
from masklet.trainer import evaluate_all
from masklet.trainer import train_sequence

from . import __version__


logger = logging.getLogger(__name__)

DATA_ENV: Final[str] = "MASKLET_DATA"
EVAL_MODES: Final[tuple[str, ...]] = ("known-task", "entropy", "fecam")

app = typer.Typer(
    name="masklet",
    help="Continual learning with hypernetwork-generated semi-binary masks",
    no_args_is_help=True,
)
console = Console()


def _version_callback(value: bool) -> None:
    """Print version and exit early when --version is provided."""
    if value:
        console.print(__version__)
        raise typer.Exit(code=0)


@app.callback()
def main(
    version: Annotated[
        bool,
        typer.Option(
            "--version",
            "-V",
            help="Show version and exit",
            callback=_version_callback,
            is_eager=True,
        ),
    ] = False,
) -> None:
    """Train and evaluate mask-based continual learners on MNIST task streams."""


def _setup_logging(verbose: bool) -> None:
    logger = logging.getLogger("masklet")
    logger.handlers.clear()
    logger.addHandler(RichHandler(console=console, show_path=False, markup=False))
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def _data_root(data_dir: Path | None) -> Path:
    if data_dir is not None:
        return data_dir
    return Path(os.environ.get(DATA_ENV, "data"))


def parse_overrides(args: list[str]) -> dict[str, str]:
    """
    Turn extra ``--key value`` / ``--key=value`` arguments into config overrides.

    A flag followed by another flag (or nothing) is read as ``true``.

    Raises
    ------
    ConfigError
        If an argument is not a ``--key`` flag.
    """
    overrides: dict[str, str] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise ConfigError(f"Unexpected argument '{arg}'")
        key, sep, value = arg[2:].partition("=")
        if not sep:
            if i + 1 < len(args) and not args[i + 1].startswith("--"):
                value = args[i + 1]
                i += 1
            else:
                value = "true"
        overrides[key] = value
        i += 1
    return overrides


class _ProgressSink:
    """Render training progress with one bar per task."""

    def __init__(self, progress: Progress, iterations: int, tasks: int) -> None:
        self.progress = progress
        self.iterations = iterations
        self.tasks = tasks
        self.bar: TaskID | None = None

    def on_iteration(self, record: LossRecord) -> None:
        if self.bar is None:
            self.bar = self.progress.add_task(
                f"Task {record.task + 1}/{self.tasks}", total=self.iterations, loss=0.0
            )
        self.progress.update(self.bar, advance=1, loss=record.total)

    def on_task_end(self, task: int, accuracies: list[float]) -> None:
        self.bar = None
        row = ", ".join(f"{a:.2f}" for a in accuracies)
        self.progress.console.print(f"✓ Task {task + 1} done. Accuracies: {row}")


def _accuracy_table(state: TrainedState) -> Table:
    table = Table(title="Known-task test accuracy (%)")
    table.add_column("after task", justify="right")
    for i in range(state.accuracy.num_tasks):
        table.add_column(f"task {i + 1}", justify="right")
    for j in range(state.accuracy.completed):
        cells = [f"{v:.2f}" for v in state.accuracy.values[j, : j + 1]]
        table.add_row(str(j + 1), *cells)
    return table


def _write_run_outputs(state: TrainedState, out: Path, preset: str, data_root: Path) -> None:
    write_checkpoint(state, out / "checkpoint", overwrite=True)
    state.accuracy.to_csv(out / "accuracy.csv")
    losses = pd.DataFrame([asdict(r) for r in state.loss_log])
    if not losses.empty:
        losses["task"] = losses["task"] + 1
    losses.to_csv(out / "losses.csv", index=False)
    for k, frame in drift_report(state.target_history).items():
        frame.to_csv(out / f"drift_layer{k}.csv", index_label="snapshot")
    dump_config(state.config, out / "config.txt")
    stage_rows = [
        {"mode": mode, "stage": j + 1, "accuracy": acc, "task_selection": sel}
        for mode, stages in state.stage_results.items()
        for j, (acc, sel) in sorted(stages.items())
    ]
    if stage_rows:
        pd.DataFrame(stage_rows).to_csv(out / "task_agnostic.csv", index=False)

    metrics: dict[str, Any] = {
        "mean_final_accuracy": mean_final_accuracy(state.accuracy),
        "accuracy": state.accuracy.to_list(),
    }
    if state.accuracy.completed >= 2:
        metrics["backward_transfer"] = backward_transfer(state.accuracy)
    for mode, stages in state.stage_results.items():
        accuracies = [acc for _, (acc, _) in sorted(stages.items())]
        last, average = fecam_protocol_accuracy(accuracies)
        metrics[f"{mode}_last"] = last
        metrics[f"{mode}_average"] = average
    write_run_manifest(
        out,
        {
            "masklet_version": __version__,
            "preset": preset,
            "seed": state.config.seed,
            "data_dir": str(data_root),
            "config": state.config.to_dict(),
            "task_seconds": state.task_seconds,
            "metrics": metrics,
        },
    )


def _fail(prefix: str, error: Exception, code: int) -> typer.Exit:
    console.print(f"❌ {prefix}: {error}", style="red")
    return typer.Exit(code)


def _run_guarded(action: Any) -> None:
    try:
        action()
    except typer.Exit:
        raise
    except ConfigError as e:
        raise _fail("Configuration error", e, 2) from e
    except DataError as e:
        raise _fail("Data error", e, 3) from e
    except DivergenceError as e:
        raise _fail("Training diverged", e, 4) from e
    except MaskletError as e:
        raise _fail("Error", e, 1) from e
    except FileNotFoundError as e:
        raise _fail("No such file or directory", e, 2) from e
    except Exception as e:
        raise _fail("Unexpected error", e, 1) from e


@app.command(
    context_settings={"allow_extra_args": True, "ignore_unknown_options": True},
)
def train(
    ctx: typer.Context,
    preset: Annotated[
        str,
        typer.Option("--preset", "-p", help="Preset to start from (see `masklet presets`)"),
    ] = "split-mnist-small",
    config: Annotated[
        Path | None,
        typer.Option("--config", "-c", help="key = value file applied over the preset"),
    ] = None,
    seed: Annotated[int | None, typer.Option("--seed", help="Run seed")] = None,
    tasks: Annotated[int | None, typer.Option("--tasks", help="Number of tasks")] = None,
    out: Annotated[
        Path | None,
        typer.Option("--out", "-o", help="Run directory (default: runs/<preset>-s<seed>)"),
    ] = None,
    data_dir: Annotated[
        Path | None,
        typer.Option("--data-dir", help=f"MNIST directory (default: ${DATA_ENV} or ./data)"),
    ] = None,
    overwrite: Annotated[
        bool, typer.Option("--overwrite", help="Reuse a non-empty run directory")
    ] = False,
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging")] = False,
) -> None:
    """
    Train a task stream and write checkpoint, CSV reports and run manifest.

    Any configuration key can be overridden with `--key value`, for example
    `--batch-size 64 --sparsity 0`.
    """
    _setup_logging(verbose)

    def action() -> None:
        overrides: dict[str, Any] = parse_overrides(list(ctx.args))
        if seed is not None:
            overrides["seed"] = seed
        if tasks is not None:
            overrides["tasks"] = tasks
        cfg = resolve_config(preset, config, overrides)

        run_dir = out if out is not None else Path("runs") / f"{preset}-s{cfg.seed}"
        if run_dir.exists() and any(run_dir.iterdir()) and not overwrite:
            console.print(
                f"❌ Run directory '{run_dir}' is not empty. Use --overwrite to reuse it.",
                style="red",
            )
            raise typer.Exit(2)

        root = _data_root(data_dir)
        task_data = build_tasks(cfg, load_mnist(root))
        console.print(
            f"Training {cfg.tasks} task(s) of {cfg.dataset} "
            f"with preset '{preset}' (seed {cfg.seed})..."
        )
        with Progress(
            TextColumn("{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TextColumn("loss {task.fields[loss]:.4f}"),
            TimeElapsedColumn(),
            console=console,
        ) as progress:
            sink = _ProgressSink(progress, cfg.iterations, cfg.tasks)
            state = train_sequence(task_data, cfg, sink=sink)

        run_dir.mkdir(parents=True, exist_ok=True)
        _write_run_outputs(state, run_dir, preset, root)
        console.print(_accuracy_table(state))
        console.print(
            f"✓ Mean final accuracy {mean_final_accuracy(state.accuracy):.2f}%. "
            f"Run written to '{run_dir}'",
            style="green",
        )

    _run_guarded(action)


def _eval_rows(state: TrainedState, mode: str, data_root: Path) -> list[tuple[str, float]]:
    tasks = build_tasks(state.config, load_mnist(data_root))
    if mode == "known-task":
        accuracies = evaluate_all(state, tasks[: state.trained_tasks])
        rows = [(f"task_{i + 1}", a) for i, a in enumerate(accuracies)]
        rows.append(("mean_accuracy", sum(accuracies) / len(accuracies)))
        if state.accuracy.completed >= 2:
            rows.append(("backward_transfer", backward_transfer(state.accuracy)))
        return rows

    report = evaluate_task_agnostic(state, tasks, mode)
    rows = []
    for j, acc, sel in zip(
        report.stages, report.stage_accuracy, report.stage_task_selection, strict=True
    ):
        rows.append((f"stage_{j}_accuracy", acc))
        rows.append((f"stage_{j}_task_selection", sel))
    last, average = report.protocol()
    rows.extend(
        [
            ("overall_accuracy", report.overall_accuracy),
            ("task_selection_accuracy", report.task_selection_accuracy),
            ("last", last),
            ("average", average),
        ]
    )
    return rows


@app.command("eval")
def evaluate_checkpoint(
    checkpoint: Annotated[
        Path, typer.Argument(help="Checkpoint directory", show_default=False)
    ],
    mode: Annotated[
        str,
        typer.Option("--mode", "-m", help="known-task, entropy or fecam"),
    ] = "known-task",
    out: Annotated[
        Path | None,
        typer.Option("--out", "-o", help="Metrics CSV (default: next to the checkpoint)"),
    ] = None,
    data_dir: Annotated[
        Path | None,
        typer.Option("--data-dir", help=f"MNIST directory (default: ${DATA_ENV} or ./data)"),
    ] = None,
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging")] = False,
) -> None:
    """Evaluate a checkpoint with known task identity or by task inference."""
    _setup_logging(verbose)

    def action() -> None:
        if mode not in EVAL_MODES:
            raise ConfigError(
                f"Unknown mode '{mode}'. Supported: {', '.join(EVAL_MODES)}", "mode"
            )
        state = read_checkpoint(checkpoint)
        known_prototypes = len(state.prototypes)
        rows = _eval_rows(state, mode, _data_root(data_dir))
        if mode == "fecam" and len(state.prototypes) != known_prototypes:
            logger.info("Storing %d prototype(s) in the checkpoint", len(state.prototypes))
            write_checkpoint(state, checkpoint, overwrite=True)

        target = out if out is not None else checkpoint.parent / f"eval_{mode}.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=["metric", "value"]).to_csv(target, index=False)

        table = Table(title=f"Evaluation ({mode})")
        table.add_column("metric")
        table.add_column("value", justify="right")
        for name, value in rows:
            table.add_row(name, f"{value:.3f}")
        console.print(table)
        console.print(f"✓ Metrics written to '{target}'", style="green")

    _run_guarded(action)


@app.command("presets")
def show_presets() -> None:
    """List the shipped configuration presets."""
    table = Table(title="Presets")
    table.add_column("name")
    table.add_column("aliases")
    table.add_column("dataset")
    table.add_column("tasks", justify="right")
    table.add_column("description")
    for p in list_presets():
        table.add_row(
            p.name,
            ", ".join(p.aliases),
            p.config.dataset,
            str(p.config.tasks),
            p.description,
        )
    console.print(table)


if __name__ == "__main__":
    app()
