"""Service for printing and saving run reports."""

from pathlib import Path
from typing import Optional, Sequence

from loguru import logger
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from avs.models.report import AblationRecord, EvalReport, LatencyRecord, StreamReport, TrainReport


def _ms(seconds: float) -> str:
    return f"{seconds * 1000:.1f} ms"


class ReportGenerator:
    """Generates and outputs run reports."""

    def __init__(self, console: Optional[Console] = None, output_dir: Optional[Path] = None):
        """
        Initialize report generator.

        Args:
            console: Rich console for terminal output
            output_dir: Directory to save report files
        """
        self.console = console or Console()
        self.output_dir = output_dir

    def print_train_report(self, report: TrainReport) -> None:
        """Print a teacher-pretraining summary."""
        self.console.print()
        self.console.rule("[bold]Teacher Training[/]")

        table = Table(show_header=True, header_style="bold")
        table.add_column("Metric", style="cyan")
        table.add_column("Value", justify="right")
        table.add_row("Steps", str(report.steps))
        table.add_row("Initial flow loss", f"{report.initial_flow_loss:.5f}")
        table.add_row("Final flow loss", f"{report.final_flow_loss:.5f}")
        ratio_color = "green" if report.loss_ratio <= 0.5 else "yellow"
        table.add_row("Final / initial", f"[{ratio_color}]{report.loss_ratio:.3f}[/]")
        if report.pointer_mae is not None:
            mae_color = "green" if report.pointer_mae < 0.5 else "yellow"
            table.add_row("Pointer MAE", f"[{mae_color}]{report.pointer_mae:.3f} tokens[/]")
        table.add_row("Duration", f"{report.duration_seconds:.1f}s")
        self.console.print(table)
        if report.checkpoint:
            self.console.print(f"[dim]Checkpoint: {report.checkpoint}[/]")

    def latency_table(
        self,
        records: Sequence[LatencyRecord],
        title: str = "Latency",
        labels: Optional[Sequence[str]] = None,
    ) -> Table:
        table = Table(title=title, show_header=True, header_style="bold")
        table.add_column("Chunk" if labels is None else "Mode", justify="right")
        table.add_column("Cursor", justify="right")
        for name in ("Generate", "Decode", "Preprocess", "Write", "Wall", "Budget"):
            table.add_column(name, justify="right")
        table.add_column("RT")
        for i, r in enumerate(records):
            table.add_row(
                str(r.chunk_index) if labels is None else labels[i],
                f"{r.cursor:.2f}",
                _ms(r.generate_s),
                _ms(r.decode_s),
                _ms(r.preprocess_s),
                _ms(r.write_s),
                _ms(r.wall_s),
                _ms(r.budget_s),
                "[green]yes[/]" if r.real_time else "[red]no[/]",
            )
        return table

    def print_stream_report(self, report: StreamReport, show_chunks: bool = False) -> None:
        """Print a streaming run summary."""
        self.console.print()
        self.console.rule("[bold]Stream[/]")
        lines = [
            f"Chunks: {report.n_chunks}",
            f"Cursor: {report.final_cursor:.2f} / {report.n_tokens}",
            f"Sink: {'on' if report.sink else 'off'}",
            f"Real-time chunks: {report.real_time_chunks}/{len(report.latencies)}",
            f"Mean wall: {_ms(report.mean_wall_s)}",
            f"Drift: {'n/a' if report.drift is None else f'{report.drift:.5f}'}",
        ]
        if report.container:
            lines.append(f"Container: {report.container}")
        self.console.print(Panel("\n".join(lines), title="Summary", border_style="blue"))
        if show_chunks and report.latencies:
            self.console.print(self.latency_table(report.latencies))

    def print_eval_report(self, report: EvalReport) -> None:
        """Print container metrics."""
        self.console.print()
        self.console.rule(f"[bold]Evaluation[/] [dim]{report.container}[/]")
        table = Table(show_header=True, header_style="bold")
        table.add_column("Metric", style="cyan")
        table.add_column("Value", justify="right")
        table.add_row("Chunks", str(report.n_chunks))
        table.add_row("Transcript tokens", str(report.n_tokens))
        table.add_row("Final cursor", f"{report.final_cursor:.2f}")
        table.add_row("WER-proxy", f"{report.wer_proxy:.3f}")
        table.add_row("Drift", "n/a" if report.drift is None else f"{report.drift:.5f}")
        table.add_row(
            "Cursor audit",
            "[green]monotone[/]" if report.cursor_monotone
            else f"[red]{report.cursor_regressions} regressions[/]",
        )
        table.add_row("Mean wall", _ms(report.mean_wall_s))
        table.add_row("Real-time fraction", f"{report.real_time_fraction:.0%}")
        table.add_row("Budget", _ms(report.budget_s))
        self.console.print(table)
        if report.parity:
            self.print_parity(report)

    def print_parity(self, report: EvalReport) -> None:
        """Print student-versus-teacher sample statistics per modality."""
        table = Table(title="Student vs teacher", show_header=True, header_style="bold")
        table.add_column("Modality", style="cyan")
        table.add_column("Steps", justify="right")
        table.add_column("Samples", justify="right")
        table.add_column("Mean error", justify="right")
        table.add_column("Variance ratio", justify="right")
        table.add_column("Status")
        for r in report.parity:
            table.add_row(
                r.modality,
                f"{r.student_steps} vs {r.teacher_steps}",
                str(r.n_samples),
                f"{r.mean_error:.3f}",
                f"{r.variance_ratio_min:.3f} - {r.variance_ratio_max:.3f}",
                "[green]within[/]" if r.within_tolerance else f"[red]outside {r.tolerance:.0%}[/]",
            )
        self.console.print(table)

    def print_ledger(self, sequential: LatencyRecord, overlapped: LatencyRecord) -> None:
        """Print the per-chunk latency arithmetic with and without overlap."""
        table = self.latency_table(
            [sequential, overlapped], title="Latency ledger", labels=["sequential", "overlap"]
        )
        self.console.print(table)

    def print_ablation(self, records: Sequence[AblationRecord]) -> None:
        """Print the paired sink ablation."""
        table = Table(title="Sink ablation", show_header=True, header_style="bold")
        table.add_column("Seed", justify="right")
        table.add_column("Drift (sink)", justify="right")
        table.add_column("Drift (no sink)", justify="right")
        table.add_column("Sink helps")
        for r in records:
            table.add_row(
                str(r.seed),
                f"{r.drift_with_sink:.5f}",
                f"{r.drift_without_sink:.5f}",
                "[green]yes[/]" if r.sink_helps else "[red]no[/]",
            )
        self.console.print(table)
        wins = sum(r.sink_helps for r in records)
        self.console.print(f"Sink lowers drift in [bold]{wins}/{len(records)}[/] seeds")

    def generate_markdown_report(
        self,
        train: Optional[TrainReport] = None,
        stream: Optional[StreamReport] = None,
        evaluation: Optional[EvalReport] = None,
    ) -> str:
        """Generate a markdown report string."""
        lines = ["# AV Stream - Run Report", ""]
        if train is not None:
            lines += [
                "## Teacher training",
                "",
                f"- **Steps:** {train.steps}",
                f"- **Flow loss:** {train.initial_flow_loss:.5f} -> {train.final_flow_loss:.5f} "
                f"(x{train.loss_ratio:.3f})",
            ]
            if train.pointer_mae is not None:
                lines.append(f"- **Pointer MAE:** {train.pointer_mae:.3f} tokens")
            lines.append("")
        if stream is not None:
            lines += [
                "## Stream",
                "",
                f"- **Chunks:** {stream.n_chunks}",
                f"- **Cursor:** {stream.final_cursor:.2f} / {stream.n_tokens}",
                f"- **Sink:** {'on' if stream.sink else 'off'}",
                f"- **Real-time chunks:** {stream.real_time_chunks}/{len(stream.latencies)}",
                f"- **Drift:** {'n/a' if stream.drift is None else f'{stream.drift:.5f}'}",
                "",
            ]
        if evaluation is not None:
            lines += [
                "## Evaluation",
                "",
                f"- **WER-proxy:** {evaluation.wer_proxy:.3f}",
                f"- **Cursor monotone:** {'yes' if evaluation.cursor_monotone else 'no'}",
                f"- **Real-time fraction:** {evaluation.real_time_fraction:.0%}",
                "",
            ]
        return "\n".join(lines)

    def save_report(self, content: str, filename: str = "report.md") -> Path:
        """Save a markdown report to the output directory."""
        if not self.output_dir:
            raise ValueError("No output directory configured")

        self.output_dir.mkdir(parents=True, exist_ok=True)
        filepath = self.output_dir / filename
        filepath.write_text(content, encoding="utf-8")
        logger.info(f"Report saved to: {filepath}")
        return filepath
