"""Command-line interface for avstream."""

import sys
from pathlib import Path
from typing import Any, Callable, Optional

import typer
from loguru import logger
from pydantic import ValidationError
from rich.console import Console
from rich.syntax import Syntax

from avs.core.config import RunConfig, get_settings, log_run_config
from avs.core.errors import EXIT_VALIDATION, AvsError, ConfigValidationError
from avs.core.logger import setup_logging

app = typer.Typer(
    name="avs",
    help="avstream - desk-scale streaming joint audio-video generation",
    add_completion=False,
)

# Force UTF-8 output on Windows
if sys.platform == "win32":
    sys.stdout.reconfigure(encoding="utf-8", errors="replace")

console = Console(force_terminal=True)

CONFIG_OPTION = typer.Option(None, "--config", "-c", help="Run config YAML")
SEED_OPTION = typer.Option(None, "--seed", help="Override the run seed")


def load_run(config: Optional[Path], **overrides: Any) -> RunConfig:
    """
    Load the run config and apply dotted overrides (``distill.sink=False``).

    The merged document is validated again so overrides cannot break an
    invariant.
    """
    run = RunConfig.load(config)
    data = run.model_dump()
    for key, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = key.split(".")
        node = data
        for p in parents:
            node = node[p]
        node[leaf] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError(f"invalid overrides: {e}") from e


def guarded(fn: Callable[[], Any]) -> Any:
    """Run a command body and map failures to exit codes 1 / 2."""
    try:
        return fn()
    except AvsError as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(e.exit_code) from e
    except (ValidationError, ValueError, FileNotFoundError) as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(EXIT_VALIDATION) from e


def _runner(run: RunConfig):
    from avs.services.runner import Runner

    settings = get_settings()
    setup_logging(level=settings.log_level, log_dir=settings.get_log_path(run), json_logs=settings.log_json)
    log_run_config(run, settings)
    return Runner(settings, run, console=console)


@app.command("train-teacher")
def train_teacher(
    config: Optional[Path] = CONFIG_OPTION,
    steps: Optional[int] = typer.Option(None, "--steps", help="Override train.steps"),
    seed: Optional[int] = SEED_OPTION,
) -> None:
    """Jointly train orchestrator, denoiser and pointer on the synthetic world."""

    def body():
        run = load_run(config, **{"train.steps": steps, "seed": seed})
        _runner(run).train_teacher()

    guarded(body)


@app.command()
def distill(
    stage: str = typer.Option("both", "--stage", help="1, 2 or both"),
    config: Optional[Path] = CONFIG_OPTION,
    teacher: Optional[Path] = typer.Option(None, "--teacher", help="Teacher checkpoint"),
    skip_stage1: bool = typer.Option(False, "--skip-stage1", help="Stage II straight from the teacher"),
    loss_window: Optional[int] = typer.Option(None, "--loss-window", help="Chunks in the Stage II loss"),
    rollout_chunks: Optional[int] = typer.Option(None, "--rollout-chunks", help="Chunks per rollout"),
    no_sink: bool = typer.Option(False, "--no-sink", help="Disable the sink chunk"),
    seed: Optional[int] = SEED_OPTION,
) -> None:
    """Two-stage distillation of the teacher into a few-step student."""

    def body():
        run = load_run(
            config,
            **{
                "distill.skip_stage1": True if skip_stage1 else None,
                "distill.loss_window": loss_window,
                "distill.rollout_chunks": rollout_chunks,
                "distill.sink": False if no_sink else None,
                "seed": seed,
            },
        )
        paths = _runner(run).distill(stage, teacher)
        for tag, path in paths.items():
            console.print(f"[green]{tag}[/green] -> {path}")

    guarded(body)


@app.command()
def stream(
    config: Optional[Path] = CONFIG_OPTION,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Student checkpoint"),
    transcript: Optional[Path] = typer.Option(None, "--transcript", help="Token ids, whitespace separated"),
    n_chunks: Optional[int] = typer.Option(None, "--chunks", "-n", help="Maximum chunks"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Stream container path"),
    no_sink: bool = typer.Option(False, "--no-sink", help="Disable the sink chunk"),
    no_overlap: bool = typer.Option(False, "--no-overlap", help="Run the stages sequentially"),
    seed: int = typer.Option(0, "--seed", help="Stream seed"),
) -> None:
    """Stream a transcript chunk by chunk and write the container and traces."""

    def body():
        run = load_run(
            config,
            **{
                "stream.sink": False if no_sink else None,
                "stream.overlap": False if no_overlap else None,
            },
        )
        _runner(run).stream(checkpoint, transcript, n_chunks, output, seed)

    guarded(body)


@app.command("eval")
def evaluate(
    container: Path = typer.Argument(..., help="Stream container"),
    parity: bool = typer.Option(
        False, "--parity", help="Also compare the run's latest student with its many-step teacher"
    ),
    parity_samples: Optional[int] = typer.Option(None, "--parity-samples", help="Samples per side"),
) -> None:
    """Report WER-proxy, drift, cursor audit and latency of a stream container."""

    def body():
        from avs.parsers.stream_container import read_container

        run = read_container(container).header.config
        _runner(run).evaluate(container, parity=parity, parity_samples=parity_samples)

    guarded(body)


@app.command("gen-world")
def gen_world(
    config: Optional[Path] = CONFIG_OPTION,
    n_samples: int = typer.Option(16, "--samples", help="Number of samples"),
    n_tokens: int = typer.Option(32, "--tokens", help="Tokens per sample"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="SCW1 output path"),
    seed: Optional[int] = SEED_OPTION,
) -> None:
    """Write synthetic world samples."""

    def body():
        run = load_run(config, seed=seed)
        path = _runner(run).gen_world(n_samples, n_tokens, output)
        console.print(f"[green]Wrote[/green] {n_samples} samples to {path}")

    guarded(body)


@app.command("show-config")
def show_config(config: Optional[Path] = CONFIG_OPTION) -> None:
    """Print the resolved run config as YAML."""

    def body():
        run = load_run(config)
        console.print(Syntax(run.to_yaml(), "yaml"))

    guarded(body)


@app.command()
def ledger() -> None:
    """Per-chunk latency arithmetic of the published stage durations."""
    from avs.core.scheduler import reference_ledger
    from avs.services.report_generator import ReportGenerator

    ReportGenerator(console=console).print_ledger(
        reference_ledger(overlap=False), reference_ledger(overlap=True)
    )


@app.command("sink-ablation")
def sink_ablation(
    config: Optional[Path] = CONFIG_OPTION,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Student checkpoint"),
    seeds: int = typer.Option(10, "--seeds", help="Number of paired seeds"),
    n_chunks: Optional[int] = typer.Option(None, "--chunks", "-n", help="Chunks per stream"),
) -> None:
    """Paired-seed drift with and without the sink chunk."""

    def body():
        run = load_run(config)
        _runner(run).sink_ablation(checkpoint, list(range(seeds)), n_chunks)

    guarded(body)


@app.command()
def version() -> None:
    """Show version information."""
    from avs import __version__

    console.print(f"avstream v{__version__}")


if __name__ == "__main__":
    app()
