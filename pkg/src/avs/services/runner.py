"""Command implementations shared by the CLI."""

import asyncio
from pathlib import Path
from typing import Optional, Sequence

import torch
from loguru import logger
from rich.console import Console

from avs.core.config import RunConfig, Settings
from avs.core.errors import CheckpointError
from avs.models.report import AblationRecord, EvalReport, StreamReport, TrainReport
from avs.parsers.checkpoint import load_checkpoint
from avs.parsers.samples import write_samples
from avs.parsers.stream_container import read_container
from avs.parsers.traces import TraceWriter
from avs.services.bundle import NetworkBundle
from avs.services.distill import Distiller, teacher_parity
from avs.services.metrics import evaluate_container
from avs.services.report_generator import ReportGenerator
from avs.services.stream import StreamEngine, sink_ablation, stream_drift
from avs.services.synthworld import gen_sample, hashed_seed, reference_stats
from avs.services.trainer import TeacherTrainer


def read_transcript(path: Path) -> list[int]:
    """Whitespace-separated token ids."""
    text = path.read_text(encoding="utf-8")
    try:
        return [int(tok) for tok in text.split()]
    except ValueError as e:
        raise ValueError(f"{path}: transcript must contain integer token ids") from e


class Runner:
    """Runs experiment commands for one run configuration."""

    def __init__(self, settings: Settings, run: RunConfig, console: Optional[Console] = None):
        """
        Initialize runner.

        Args:
            settings: Process settings (output root, log level)
            run: Experiment configuration
            console: Rich console for reports
        """
        self.settings = settings
        self.run = run
        self.output_dir = settings.resolve_output(run)
        self.reports = ReportGenerator(console=console, output_dir=self.output_dir / "reports")
        torch.manual_seed(run.seed)

    def checkpoint(self, tag: str) -> Path:
        return self.output_dir / "checkpoints" / f"{tag}.sck"

    def _reference(self) -> tuple[torch.Tensor, torch.Tensor]:
        return reference_stats(self.run.world, self.run.stream.reference_samples)

    def load_bundle(self, path: Path, expect_tag: Optional[str] = None) -> NetworkBundle:
        return NetworkBundle.from_checkpoint(load_checkpoint(path, expect_tag), self.run)

    # -- commands ------------------------------------------------------------

    def train_teacher(self, steps: Optional[int] = None) -> TrainReport:
        self.run.save(self.output_dir / "config.yaml")
        report = TeacherTrainer(self.run, self.output_dir).train(steps)
        self.reports.print_train_report(report)
        self.reports.save_report(self.reports.generate_markdown_report(train=report), "train.md")
        return report

    def distill(self, stage: str, teacher_ckpt: Optional[Path] = None) -> dict[str, Path]:
        """
        Run Stage I, Stage II or both from a teacher checkpoint.

        Stage II alone continues from the ``student_stage1`` checkpoint
        unless ``distill.skip_stage1`` is set.
        """
        if stage not in ("1", "2", "both"):
            raise ValueError(f"stage must be 1, 2 or both, got {stage!r}")
        teacher = self.load_bundle(teacher_ckpt or self.checkpoint("teacher"), "teacher")
        distiller = Distiller(self.run, teacher, self.output_dir)
        if stage == "2" and not self.run.distill.skip_stage1:
            path = self.checkpoint("student_stage1")
            if not path.exists():
                raise CheckpointError(
                    f"stage 2 needs {path}; run stage 1 first or pass --skip-stage1"
                )
            ckpt = load_checkpoint(path, "student_stage1")
            stage1 = NetworkBundle.from_checkpoint(ckpt, self.run)
            fake = None
            if ckpt.has("fake_score"):
                fake = NetworkBundle.from_checkpoint(ckpt, self.run, "fake_score").denoiser
            distiller.load_student(stage1.denoiser, fake)
        return distiller.run_stages(stage)

    def _student(self, ckpt: Optional[Path]) -> NetworkBundle:
        if ckpt is not None:
            return self.load_bundle(ckpt)
        for tag in ("student_stage2", "student_stage1", "teacher"):
            if self.checkpoint(tag).exists():
                return self.load_bundle(self.checkpoint(tag), tag)
        raise CheckpointError(f"no checkpoint found under {self.output_dir / 'checkpoints'}")

    def stream(
        self,
        ckpt: Optional[Path] = None,
        transcript: Optional[Path] = None,
        n_chunks: Optional[int] = None,
        container: Optional[Path] = None,
        seed: int = 0,
    ) -> StreamReport:
        """Stream a transcript (or a synthetic one) and write container and traces."""
        bundle = self._student(ckpt)
        n_chunks = self.run.stream.n_chunks if n_chunks is None else n_chunks
        if transcript is not None:
            engine = StreamEngine.from_transcript(self.run, bundle, read_transcript(transcript), seed=seed)
        elif self.run.stream.transcript_tokens == 0:
            engine = StreamEngine.from_transcript(self.run, bundle, [], seed=seed)
        else:
            sample = gen_sample(
                self.run.world, self.run.stream.transcript_tokens, hashed_seed("stream", self.run.seed, seed)
            )
            engine = StreamEngine.from_sample(self.run, bundle, sample, seed=seed)

        target = container or self.output_dir / "streams" / f"stream_{seed}.scs"
        logger.info(
            f"[Stream] {engine.n_tokens} tokens, up to {n_chunks} chunks, "
            f"sink={'on' if engine.sink else 'off'}, overlap={'on' if engine.overlap else 'off'}"
        )
        report = asyncio.run(engine.run(n_chunks, target))
        TraceWriter(self.output_dir / "traces" / f"latency_{seed}.jsonl").write_all(report.latencies)
        report.drift, records = stream_drift(self.run, engine.video(), self._reference())
        TraceWriter(self.output_dir / "traces" / f"drift_{seed}.jsonl").write_all(records)
        self.reports.print_stream_report(report)
        return report

    def evaluate(
        self, container: Path, parity: bool = False, parity_samples: Optional[int] = None
    ) -> EvalReport:
        """
        Container metrics; with ``parity`` also the latest student of this run
        against its teacher sampled with ``distill.teacher_steps`` steps.
        """
        report = evaluate_container(read_container(container), self._reference(), str(container))
        if parity:
            teacher = self.load_bundle(self.checkpoint("teacher"), "teacher")
            report.parity = teacher_parity(
                self.run, teacher, self._distilled().denoiser, parity_samples, seed=self.run.seed
            )
        self.reports.print_eval_report(report)
        return report

    def _distilled(self) -> NetworkBundle:
        for tag in ("student_stage2", "student_stage1"):
            if self.checkpoint(tag).exists():
                return self.load_bundle(self.checkpoint(tag), tag)
        raise CheckpointError(f"no student checkpoint under {self.output_dir / 'checkpoints'}; run distill first")

    def gen_world(self, n_samples: int, n_tokens: int, out: Optional[Path] = None) -> Path:
        samples = [
            gen_sample(self.run.world, n_tokens, hashed_seed("gen-world", self.run.seed, i))
            for i in range(n_samples)
        ]
        return write_samples(out or self.output_dir / "world.scw", self.run.world, samples)

    def sink_ablation(
        self, ckpt: Optional[Path], seeds: Sequence[int], n_chunks: Optional[int] = None
    ) -> list[AblationRecord]:
        bundle = self._student(ckpt)
        records = sink_ablation(
            self.run, bundle, seeds, n_chunks or self.run.stream.n_chunks, self._reference()
        )
        TraceWriter(self.output_dir / "traces" / "sink_ablation.jsonl").write_all(records)
        self.reports.print_ablation(records)
        return records
