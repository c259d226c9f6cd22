"""Trace records (JSONL) and run reports."""

from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

from pydantic import BaseModel, Field, computed_field


class LatencyRecord(BaseModel):
    """Per-chunk stage timings against the playback budget."""

    chunk_index: int = 0
    cursor: float = 0.0
    generate_s: float = Field(default=0.0, ge=0)
    decode_s: float = Field(default=0.0, ge=0)
    preprocess_s: float = Field(default=0.0, ge=0)
    write_s: float = Field(default=0.0, ge=0)
    wall_s: float = Field(default=0.0, ge=0)
    budget_s: float = Field(default=33 / 24, gt=0)

    @computed_field  # type: ignore[prop-decorator]
    @property
    def real_time(self) -> bool:
        return self.wall_s <= self.budget_s

    @property
    def stage_sum_s(self) -> float:
        return self.generate_s + self.decode_s + self.preprocess_s + self.write_s


class TrainRecord(BaseModel):
    """One teacher-pretraining log line."""

    step: int
    phase: str
    flow_loss: Optional[float] = None
    pap_loss: float
    total_loss: float


class DistillRecord(BaseModel):
    """One distillation step."""

    stage: int
    step: int
    generator_loss: float
    fake_loss: float
    student_grad_norm: float
    fake_grad_norm: float
    t: float
    cursor: Optional[float] = None


class ParityRecord(BaseModel):
    """Sample statistics of the few-step student against the many-step teacher, one modality."""

    modality: str
    n_samples: int
    teacher_steps: int
    student_steps: int
    # Worst latent dimension: |student mean - teacher mean| in teacher standard deviations.
    mean_error: float
    variance_ratio_min: float
    variance_ratio_max: float
    tolerance: float

    @property
    def within_tolerance(self) -> bool:
        return (
            self.mean_error <= self.tolerance
            and 1 - self.tolerance <= self.variance_ratio_min
            and self.variance_ratio_max <= 1 + self.tolerance
        )


class DriftRecord(BaseModel):
    """Drift of one segment end against the stream's opening probe."""

    segment_end_s: float
    probe_mean: float
    baseline_mean: float
    difference: float


class AblationRecord(BaseModel):
    """Paired-seed drift with and without the sink chunk."""

    seed: int
    n_chunks: int
    drift_with_sink: float
    drift_without_sink: float

    @property
    def sink_helps(self) -> bool:
        return self.drift_with_sink < self.drift_without_sink


@dataclass
class TrainReport:
    """Summary of a teacher-pretraining run."""

    steps: int
    initial_flow_loss: float = 0.0
    final_flow_loss: float = 0.0
    pointer_mae: Optional[float] = None
    checkpoint: Optional[str] = None
    duration_seconds: float = 0.0

    @property
    def loss_ratio(self) -> float:
        if self.initial_flow_loss <= 0:
            return 0.0
        return self.final_flow_loss / self.initial_flow_loss


@dataclass
class StreamReport:
    """Summary of one streaming run."""

    n_chunks: int = 0
    n_tokens: int = 0
    final_cursor: float = 0.0
    sink: bool = True
    drift: Optional[float] = None
    latencies: list[LatencyRecord] = field(default_factory=list)
    container: Optional[str] = None
    start_time: datetime = field(default_factory=datetime.now)
    end_time: Optional[datetime] = None

    @property
    def real_time_chunks(self) -> int:
        return sum(1 for r in self.latencies if r.real_time)

    @property
    def mean_wall_s(self) -> float:
        if not self.latencies:
            return 0.0
        return sum(r.wall_s for r in self.latencies) / len(self.latencies)

    def finalize(self) -> None:
        self.end_time = datetime.now()


@dataclass
class EvalReport:
    """Metrics computed from a stream container."""

    container: str
    n_chunks: int
    n_tokens: int
    wer_proxy: float
    drift: Optional[float]
    cursor_monotone: bool
    cursor_regressions: int
    final_cursor: float
    mean_wall_s: float
    real_time_fraction: float
    budget_s: float
    parity: list[ParityRecord] = field(default_factory=list)
