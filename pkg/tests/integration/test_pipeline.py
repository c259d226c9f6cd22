"""End-to-end runs of training, distillation, streaming and evaluation."""

import pytest
import torch

from avs.core.config import Settings
from avs.core.errors import CheckpointError
from avs.models.report import DistillRecord, TrainRecord
from avs.parsers.checkpoint import load_checkpoint
from avs.parsers.stream_container import read_container
from avs.parsers.traces import read_trace
from avs.services.distill import Distiller
from avs.services.runner import Runner
from avs.services.stream import sink_ablation
from avs.services.synthworld import reference_stats
from avs.services.trainer import TeacherTrainer

pytestmark = pytest.mark.slow


class TestTeacherTraining:
    """Tests for a full teacher training run."""

    def test_train_writes_checkpoint_and_trace(self, tiny_run, tmp_path):
        """Test the schedule, trace and checkpoint of a run."""
        report = TeacherTrainer(tiny_run, tmp_path).train()
        assert report.steps == tiny_run.train.steps
        ckpt = load_checkpoint(tmp_path / "checkpoints" / "teacher.sck", "teacher")
        assert ckpt.has("denoiser") and ckpt.has("orchestrator") and ckpt.has("pap")
        records = read_trace(tmp_path / "traces" / "train.jsonl", TrainRecord)
        assert [r.step for r in records] == list(range(tiny_run.train.steps))
        assert records[0].phase == "warmup" and records[-1].phase == "joint"

    def test_deterministic(self, tiny_run, tmp_path):
        """Test two runs of one config reach the same losses."""
        a = TeacherTrainer(tiny_run, tmp_path / "a").train()
        b = TeacherTrainer(tiny_run, tmp_path / "b").train()
        assert a.initial_flow_loss == b.initial_flow_loss
        assert a.final_flow_loss == b.final_flow_loss


class TestDistiller:
    """Tests for both distillation stages."""

    def test_both_stages(self, tiny_run, tiny_bundle, tmp_path):
        """Test both stages run and write tagged checkpoints."""
        teacher_params = [p.detach().clone() for p in tiny_bundle.denoiser.parameters()]
        distiller = Distiller(tiny_run, tiny_bundle, tmp_path)
        paths = distiller.run_stages("both")
        assert set(paths) == {"student_stage1", "student_stage2"}
        for tag, path in paths.items():
            ckpt = load_checkpoint(path, tag)
            assert ckpt.has("fake_score")
        assert [r.stage for r in distiller.records] == [1, 2]
        assert distiller.records[1].cursor is not None
        records = read_trace(tmp_path / "traces" / "distill.jsonl", DistillRecord)
        assert len(records) == 2
        for before, after in zip(teacher_params, distiller.state.scores.real.parameters()):
            assert torch.equal(before, after)

    def test_skip_stage1(self, tiny_run, tiny_bundle, tmp_path):
        """Test Stage II straight from the teacher."""
        run = tiny_run.model_copy(
            update={"distill": tiny_run.distill.model_copy(update={"skip_stage1": True})}
        )
        paths = Distiller(run, tiny_bundle, tmp_path).run_stages("both")
        assert set(paths) == {"student_stage2"}


class TestRunner:
    """Tests for the command runner."""

    @pytest.fixture
    def runner(self, tiny_run, tmp_path):
        settings = Settings(_env_file=None, output_root=tmp_path / "runs")
        return Runner(settings, tiny_run)

    def test_train_distill_stream_eval(self, runner, tiny_run):
        """Test the full command sequence on one run directory."""
        runner.train_teacher()
        assert runner.checkpoint("teacher").exists()
        assert (runner.output_dir / "config.yaml").exists()
        paths = runner.distill("both")
        assert paths["student_stage2"] == runner.checkpoint("student_stage2")

        report = runner.stream(n_chunks=4)
        assert report.n_chunks == 4
        container = read_container(runner.output_dir / "streams" / "stream_0.scs")
        assert len(container.records) == 4
        assert container.cursors == sorted(container.cursors)
        assert (runner.output_dir / "traces" / "latency_0.jsonl").exists()

        evaluation = runner.evaluate(runner.output_dir / "streams" / "stream_0.scs")
        assert evaluation.n_chunks == 4
        assert evaluation.cursor_monotone
        assert 0.0 <= evaluation.final_cursor <= evaluation.n_tokens

        paired = runner.evaluate(runner.output_dir / "streams" / "stream_0.scs", parity=True, parity_samples=2)
        assert [r.modality for r in paired.parity] == ["video", "audio"]
        assert all(r.n_samples == 2 and r.student_steps == tiny_run.distill.student_steps for r in paired.parity)

    def test_parity_needs_student(self, runner):
        """Test parity refuses to run before distillation."""
        runner.train_teacher()
        with pytest.raises(CheckpointError, match="run distill first"):
            runner._distilled()

    def test_stage2_needs_stage1(self, runner):
        """Test Stage II alone refuses to start without a stage-1 student."""
        runner.train_teacher()
        with pytest.raises(CheckpointError, match="run stage 1 first"):
            runner.distill("2")

    def test_invalid_stage(self, runner):
        """Test an unknown stage name."""
        with pytest.raises(ValueError, match="stage must be"):
            runner.distill("3")


class TestSinkAblation:
    """Tests for the paired sink ablation."""

    def test_records(self, tiny_run, tiny_bundle):
        """Test each seed yields one paired record with finite drifts."""
        reference = reference_stats(tiny_run.world, 8)
        records = sink_ablation(tiny_run, tiny_bundle, [0, 1], 4, reference)
        assert [r.seed for r in records] == [0, 1]
        for r in records:
            assert r.n_chunks == 4
            assert r.drift_with_sink >= 0.0
            assert r.drift_without_sink >= 0.0
