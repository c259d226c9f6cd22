"""Two-stage decoupled distillation of the teacher into a few-step student.

Stage I compresses the 50-step sampler into ``student_steps`` Euler steps
with distribution matching on ground-truth-conditioned chunks. Stage II
rolls the student out over several consecutive chunks (sink memory, its own
motion latents, pointer-advanced transcript) and applies the same loss to
the final ``loss_window`` chunks.
"""

import copy
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from einops import rearrange
from loguru import logger

from avs.core.config import DistillConfig, RunConfig
from avs.core.errors import ShapeMismatchError
from avs.core.logger import log_train_step
from avs.models.latent import Modality, Provenance
from avs.models.report import DistillRecord, ParityRecord
from avs.models.rollout import RolloutState
from avs.models.world import HistoryBuffer
from avs.networks.jointnet import JointDenoiser
from avs.parsers.traces import TraceWriter
from avs.services import flow
from avs.services.bundle import NetworkBundle
from avs.services.generator import (
    ChunkContext,
    ChunkGenerator,
    Script,
    commit_chunk,
    ground_truth_batch,
    make_noise,
    min_tokens_for,
    rollout_context,
)
from avs.services.synthworld import WorldStream, hashed_seed, make_stream, reference_audio
from avs.services.trainer import check_finite, grad_norm


@dataclass
class ScorePair:
    """Frozen teacher score and its online-trained copy."""

    real: JointDenoiser
    fake: JointDenoiser

    @classmethod
    def from_teacher(cls, teacher: JointDenoiser) -> "ScorePair":
        real = copy.deepcopy(teacher)
        real.requires_grad_(False)
        real.eval()
        fake = copy.deepcopy(teacher)
        fake.requires_grad_(True)
        return cls(real=real, fake=fake)

    def check(self, student: JointDenoiser) -> None:
        ours = {k: v.shape for k, v in student.state_dict().items()}
        for name, branch in (("real", self.real), ("fake", self.fake)):
            theirs = {k: v.shape for k, v in branch.state_dict().items()}
            if ours != theirs:
                raise ShapeMismatchError(f"{name} score parameters do not match the student")


def make_optimizer(params, lr: float) -> torch.optim.Optimizer:
    """Plain gradient descent: the learning rate is the step size."""
    return torch.optim.SGD(params, lr=lr)


def _x0(x_t: torch.Tensor, f: torch.Tensor, t: float) -> torch.Tensor:
    return x_t - t * f


def _normalised(diff: torch.Tensor, x0: torch.Tensor, x0_real: torch.Tensor) -> torch.Tensor:
    dims = tuple(range(1, x0.dim()))
    scale = (x0 - x0_real).abs().mean(dim=dims, keepdim=True).clamp_min(1e-8)
    return diff / scale


def generator_loss(
    generator: ChunkGenerator,
    scores: ScorePair,
    ctx: ChunkContext,
    x0_v: torch.Tensor,
    x0_a: torch.Tensor,
    t: float,
    noise_seed: int,
) -> torch.Tensor:
    """
    Distribution-matching surrogate on student samples.

    Re-noises the samples at t, asks both score branches for their clean
    estimates and regresses the samples onto themselves shifted by the
    normalised difference; its gradient w.r.t. the samples is the score
    difference, and it is exactly zero when the branches agree.
    """
    eps_v, eps_a = make_noise(tuple(x0_v.shape), tuple(x0_a.shape), noise_seed, x0_v.dtype)
    with torch.no_grad():
        state = flow.corrupt(x0_v.detach(), x0_a.detach(), eps_v, eps_a, t)
        c_a = generator.audio_condition(ctx, state.x_a, t)
        seq = generator._pack(ctx, state.x_v, state.x_a, c_a)
        rv, ra = scores.real(seq, t, ctx.prompt_ids)
        fv, fa = scores.fake(seq, t, ctx.prompt_ids)
        real_v, real_a = _x0(state.x_v, rv, t), _x0(state.x_a, ra, t)
        fake_v, fake_a = _x0(state.x_v, fv, t), _x0(state.x_a, fa, t)
        g_v = _normalised(fake_v - real_v, x0_v.detach(), real_v)
        g_a = _normalised(fake_a - real_a, x0_a.detach(), real_a)
    target_v = (x0_v - g_v).detach()
    target_a = (x0_a - g_a).detach()
    return 0.5 * ((x0_v - target_v) ** 2).mean() + 0.5 * ((x0_a - target_a) ** 2).mean()


def fake_score_loss(
    generator: ChunkGenerator,
    fake: JointDenoiser,
    ctx: ChunkContext,
    x0_v: torch.Tensor,
    x0_a: torch.Tensor,
    t: float,
    noise_seed: int,
) -> torch.Tensor:
    """Flow-matching loss of the fake score on (detached) student samples."""
    x0_v, x0_a = x0_v.detach(), x0_a.detach()
    eps_v, eps_a = make_noise(tuple(x0_v.shape), tuple(x0_a.shape), noise_seed, x0_v.dtype)
    state = flow.corrupt(x0_v, x0_a, eps_v, eps_a, t)
    with torch.no_grad():
        c_a = generator.audio_condition(ctx, state.x_a, t)
    f_v, f_a = fake(generator._pack(ctx, state.x_v, state.x_a, c_a), t, ctx.prompt_ids)
    return flow.flow_loss(f_v, f_a, x0_v, x0_a, eps_v, eps_a)


@dataclass
class DistillState:
    """Student, score pair and their optimizers."""

    student: JointDenoiser
    scores: ScorePair
    student_opt: torch.optim.Optimizer
    fake_opt: torch.optim.Optimizer

    @classmethod
    def from_teacher(cls, teacher: JointDenoiser, cfg: DistillConfig) -> "DistillState":
        student = copy.deepcopy(teacher)
        student.requires_grad_(True)
        scores = ScorePair.from_teacher(teacher)
        scores.check(student)
        return cls(
            student=student,
            scores=scores,
            student_opt=make_optimizer(student.parameters(), cfg.student_lr),
            fake_opt=make_optimizer(scores.fake.parameters(), cfg.fake_score_lr),
        )


def update_from_samples(
    state: DistillState,
    generator: ChunkGenerator,
    ctx: ChunkContext,
    x0_v: torch.Tensor,
    x0_a: torch.Tensor,
    t_draw: tuple[float, float],
    seed: int,
    stage: int,
    step: int,
) -> DistillRecord:
    """Student update followed by fake-score update, one serialized transaction."""
    t_gen, t_fake = t_draw
    loss_g = generator_loss(generator, state.scores, ctx, x0_v, x0_a, t_gen,
                            hashed_seed("gen-noise", seed))
    check_finite({"generator_loss": float(loss_g)}, f"stage {stage} generator loss", step)
    state.student_opt.zero_grad()
    loss_g.backward()
    g_norm = grad_norm(state.student.parameters())
    check_finite({"student_grad_norm": g_norm}, f"stage {stage} student backward", step)
    state.student_opt.step()

    loss_f = fake_score_loss(generator, state.scores.fake, ctx, x0_v, x0_a, t_fake,
                             hashed_seed("fake-noise", seed))
    check_finite({"fake_loss": float(loss_f)}, f"stage {stage} fake-score loss", step)
    state.fake_opt.zero_grad()
    loss_f.backward()
    f_norm = grad_norm(state.scores.fake.parameters())
    check_finite({"fake_grad_norm": f_norm}, f"stage {stage} fake-score backward", step)
    state.fake_opt.step()

    return DistillRecord(
        stage=stage,
        step=step,
        generator_loss=float(loss_g),
        fake_loss=float(loss_f),
        student_grad_norm=g_norm,
        fake_grad_norm=f_norm,
        t=t_gen,
    )


def draw_times(cfg: DistillConfig, seed: int) -> tuple[float, float]:
    """Re-noising times for the generator and fake-score losses, uniform in the range."""
    rng = np.random.default_rng(seed)
    lo, hi = cfg.renoise_range
    return float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))


def dmd_step(
    state: DistillState,
    generator: ChunkGenerator,
    ctx: ChunkContext,
    shape_v: tuple[int, ...],
    shape_a: tuple[int, ...],
    cfg: DistillConfig,
    seed: int,
    step: int = 0,
) -> DistillRecord:
    """
    One Stage I step: sample with the student (full backprop through its
    steps), then update student and fake score.
    """
    student_gen = generator.with_denoiser(state.student)
    dtype = next(state.student.parameters()).dtype
    noise_v, noise_a = make_noise(shape_v, shape_a, hashed_seed("student-noise", seed), dtype)
    x0_v, x0_a = student_gen.sample(
        ctx, cfg.student_steps, cfg.student_schedule, noise_v=noise_v, noise_a=noise_a
    )
    return update_from_samples(
        state, generator, ctx, x0_v, x0_a, draw_times(cfg, seed), seed, stage=1, step=step
    )


# ---------------------------------------------------------------------------
# Stage II rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutResult:
    """K generated chunks of a batch of streams plus the state traces."""

    video: list[torch.Tensor] = field(default_factory=list)  # per chunk (B, C, T, H, W)
    audio: list[torch.Tensor] = field(default_factory=list)  # per chunk (B, T_a, C_a)
    contexts: list[ChunkContext] = field(default_factory=list)
    cursors: list[list[float]] = field(default_factory=list)  # per chunk, per stream
    states: list[RolloutState] = field(default_factory=list)
    histories: list[list[HistoryBuffer]] = field(default_factory=list)  # before each chunk
    motion_provenance: list[Optional[Provenance]] = field(default_factory=list)


def _snapshot(h: HistoryBuffer) -> HistoryBuffer:
    return HistoryBuffer(h.audio.clone(), list(h.token_index), list(h.durations))


def rollout(
    run: RunConfig,
    student: ChunkGenerator,
    streams: Sequence[WorldStream],
    k_chunks: int,
    *,
    sink: bool = True,
    grad_chunks: int = 0,
    seed: int = 0,
) -> RolloutResult:
    """
    Generate ``k_chunks`` consecutive chunks per stream with the student.

    The first chunk becomes the sink; every later chunk conditions on the
    sink, the previous chunk's generated latents (never ground truth) and
    the pointer-advanced transcript window. Only the last ``grad_chunks``
    chunks keep the autograd graph.
    """
    if k_chunks < 2:
        raise ValueError(f"rollout needs at least 2 chunks, got {k_chunks}")
    cfg = run.distill
    g = run.geometry
    scripts = [Script.of(s.sample) for s in streams]
    refs = [
        reference_audio(run.world, hashed_seed("ref", seed, i), run.orchestrator.ref_audio_frames).data
        for i in range(len(streams))
    ]
    states = [RolloutState(history=HistoryBuffer.empty(run.world.audio_channels)) for _ in streams]
    result = RolloutResult(states=states)
    b = len(streams)
    c, (h, w) = run.world.video_channels, run.world.video_spatial
    shape_v = (b, c, g.video_frames, h, w)
    shape_a = (b, g.audio_frames, run.world.audio_channels)
    dtype = next(student.denoiser.parameters()).dtype

    for k in range(k_chunks):
        ctx = rollout_context(run, states, scripts, refs, sink)
        result.contexts.append(ctx)
        result.histories.append([_snapshot(s.history) for s in states])
        result.motion_provenance.append(states[0].motion.provenance if states[0].motion else None)
        noise_v, noise_a = make_noise(shape_v, shape_a, hashed_seed("rollout", seed, k), dtype)
        keep_graph = k >= k_chunks - grad_chunks
        with torch.set_grad_enabled(keep_graph and torch.is_grad_enabled()):
            x_v, x_a = student.sample(
                ctx, cfg.student_steps, cfg.student_schedule, noise_v=noise_v, noise_a=noise_a
            )
        with torch.no_grad():
            pointers = student.point(ctx, x_a.detach())
        cursors = []
        for i, (state, out) in enumerate(zip(states, pointers, strict=True)):
            end = ctx.samples[i].window.to_global(float(out.s_hat))
            _, after = commit_chunk(run, state, x_v[i], x_a[i], end, scripts[i].n_tokens, sink)
            cursors.append(after)
        result.video.append(x_v)
        result.audio.append(x_a)
        result.cursors.append(cursors)
    return result


def window_context(result: RolloutResult, loss_window: int) -> ChunkContext:
    """
    Conditioning of the concatenated loss window: the sink, the generated
    motion preceding the window, the history before it and the transcript
    truncated at the pointer endpoint of the window's last chunk.

    The window's text is what its first chunk could see. An endpoint past
    that text keeps all of it; tokens beyond it are never added.
    """
    k = len(result.video)
    first = k - loss_window
    before = result.contexts[first]
    windows = []
    for i, sc in enumerate(before.samples):
        local_end = result.cursors[-1][i] - sc.window.offset
        if local_end > sc.window.n:
            logger.debug(
                f"[Distill] endpoint {result.cursors[-1][i]:.3f} past the visible window "
                f"[{sc.window.offset}, {sc.window.offset + sc.window.n}), keeping it whole"
            )
        windows.append(sc.window.truncated(min(max(local_end, 0.0), float(sc.window.n))))
    return before.with_windows(windows)


class Distiller:
    """Runs Stage I and Stage II and persists the tagged student checkpoints."""

    def __init__(self, run: RunConfig, teacher: NetworkBundle, output_dir: Path):
        self.run = run
        self.cfg = run.distill
        self.teacher = teacher
        self.teacher.freeze_conditioning()
        self.output_dir = output_dir
        self.generator = teacher.generator()
        self.state = DistillState.from_teacher(teacher.denoiser, self.cfg)
        self.records: list[DistillRecord] = []
        self._trace: Optional[TraceWriter] = None

    def _trace_writer(self) -> TraceWriter:
        if self._trace is None:
            self._trace = TraceWriter(self.output_dir / "traces" / "distill.jsonl")
        return self._trace

    def _record(self, record: DistillRecord, total: int) -> None:
        self.records.append(record)
        self._trace_writer().write(record)
        if record.step % self.cfg.log_every == 0 or record.step == total - 1:
            log_train_step(
                f"Distill/stage{record.stage}",
                record.step,
                total,
                {"gen": record.generator_loss, "fake": record.fake_loss},
            )

    def stage1_step(self, step: int) -> DistillRecord:
        batch = ground_truth_batch(
            self.run,
            batch_seed=hashed_seed("stage1", step),
            batch_size=self.cfg.batch_size,
            context_prob=self.run.train.context_prob,
            token_range=self.run.train.sample_tokens,
        )
        return dmd_step(
            self.state,
            self.generator,
            batch.ctx,
            tuple(batch.z_v.shape),
            tuple(batch.z_a.shape),
            self.cfg,
            seed=hashed_seed("stage1-step", self.run.seed, step),
            step=step,
        )

    def streams(self, step: int) -> list[WorldStream]:
        n_tok = min_tokens_for(self.run, self.cfg.rollout_chunks + 1)
        return [
            make_stream(self.run.world, self.run.geometry, n_tok,
                        hashed_seed("stage2", self.run.seed, step, i))
            for i in range(self.cfg.batch_size)
        ]

    def stage2_step(self, step: int) -> DistillRecord:
        """Rollout K chunks, then distribution matching on the last ``loss_window``."""
        seed = hashed_seed("stage2-step", self.run.seed, step)
        student_gen = self.generator.with_denoiser(self.state.student)
        result = rollout(
            self.run,
            student_gen,
            self.streams(step),
            self.cfg.rollout_chunks,
            sink=self.cfg.sink,
            grad_chunks=self.cfg.loss_window,
            seed=seed,
        )
        x0_v = torch.cat(result.video[-self.cfg.loss_window :], dim=2)
        x0_a = torch.cat(result.audio[-self.cfg.loss_window :], dim=1)
        ctx = window_context(result, self.cfg.loss_window)
        record = update_from_samples(
            self.state, self.generator, ctx, x0_v, x0_a, draw_times(self.cfg, seed), seed,
            stage=2, step=step,
        )
        record.cursor = float(np.mean(result.cursors[-1]))
        return record

    def checkpoint_path(self, tag: str) -> Path:
        return self.output_dir / "checkpoints" / f"{tag}.sck"

    def _save(self, tag: str) -> Path:
        student = NetworkBundle(self.teacher.orchestrator, self.state.student, self.teacher.pointer)
        return student.save(
            self.checkpoint_path(tag), self.run, tag, extra={"fake_score": self.state.scores.fake}
        )

    def run_stage1(self, steps: Optional[int] = None) -> Path:
        total = self.cfg.stage1_steps if steps is None else steps
        logger.info(f"[Distill] stage I: {total} steps, student lr {self.cfg.student_lr:g}, "
                    f"fake lr {self.cfg.fake_score_lr:g}")
        for step in range(total):
            self._record(self.stage1_step(step), total)
        return self._save("student_stage1")

    def run_stage2(self, steps: Optional[int] = None) -> Path:
        total = self.cfg.stage2_steps if steps is None else steps
        logger.info(
            f"[Distill] stage II: {total} steps, K={self.cfg.rollout_chunks}, "
            f"window={self.cfg.loss_window}, sink={'on' if self.cfg.sink else 'off'}"
        )
        for step in range(total):
            self._record(self.stage2_step(step), total)
        return self._save("student_stage2")

    def load_student(self, student: JointDenoiser, fake: Optional[JointDenoiser] = None) -> None:
        """Continue from a stage-1 student (and its fake score when available)."""
        self.state.student.load_state_dict(student.state_dict())
        if fake is not None:
            self.state.scores.fake.load_state_dict(fake.state_dict())

    def run_stages(self, stage: str = "both") -> dict[str, Path]:
        start = time.monotonic()
        out: dict[str, Path] = {}
        if stage in ("1", "both") and not self.cfg.skip_stage1:
            out["student_stage1"] = self.run_stage1()
        if stage in ("2", "both"):
            out["student_stage2"] = self.run_stage2()
        logger.info(f"[Distill] finished in {time.monotonic() - start:.1f}s")
        return out


# ---------------------------------------------------------------------------
# Student against teacher
# ---------------------------------------------------------------------------


def _dimension_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-dimension mean and variance, pooled over the leading (sample, frame) axes."""
    flat = x.double().reshape(-1, x.shape[-1])
    return flat.mean(dim=0), flat.var(dim=0, unbiased=False)


def _parity_record(
    modality: Modality, teacher: torch.Tensor, student: torch.Tensor, cfg: DistillConfig, n: int
) -> ParityRecord:
    mean_t, var_t = _dimension_stats(teacher)
    mean_s, var_s = _dimension_stats(student)
    scale = var_t.sqrt().clamp_min(1e-8)
    ratio = var_s / var_t.clamp_min(1e-12)
    return ParityRecord(
        modality=modality.value,
        n_samples=n,
        teacher_steps=cfg.teacher_steps,
        student_steps=cfg.student_steps,
        mean_error=float(((mean_s - mean_t).abs() / scale).max()),
        variance_ratio_min=float(ratio.min()),
        variance_ratio_max=float(ratio.max()),
        tolerance=cfg.parity_tolerance,
    )


@torch.no_grad()
def teacher_parity(
    run: RunConfig,
    teacher: NetworkBundle,
    student: JointDenoiser,
    n_samples: Optional[int] = None,
    seed: int = 0,
    batch_size: int = 32,
) -> list[ParityRecord]:
    """
    Compare the student's ``student_steps`` samples with the teacher's
    ``teacher_steps`` uniform-schedule samples on identical contexts and noise.

    Video dimensions are latent cells (channel, row, column), audio
    dimensions are channels; both pool over samples and frames.
    """
    cfg = run.distill
    total = cfg.parity_samples if n_samples is None else n_samples
    slow = teacher.generator()
    fast = slow.with_denoiser(student)
    dtype = next(student.parameters()).dtype
    teacher_schedule = flow.uniform_schedule(cfg.teacher_steps)
    outputs: dict[str, list[torch.Tensor]] = {"tv": [], "ta": [], "sv": [], "sa": []}
    done, i = 0, 0
    while done < total:
        b = min(batch_size, total - done)
        batch = ground_truth_batch(
            run,
            batch_seed=hashed_seed("parity", seed, i),
            batch_size=b,
            context_prob=run.train.context_prob,
            token_range=run.train.sample_tokens,
        )
        noise_v, noise_a = make_noise(
            tuple(batch.z_v.shape), tuple(batch.z_a.shape), hashed_seed("parity-noise", seed, i), dtype
        )
        tv, ta = slow.sample(batch.ctx, cfg.teacher_steps, teacher_schedule, noise_v=noise_v, noise_a=noise_a)
        sv, sa = fast.sample(
            batch.ctx, cfg.student_steps, cfg.student_schedule, noise_v=noise_v, noise_a=noise_a
        )
        for key, x in (("tv", tv), ("sv", sv)):
            outputs[key].append(rearrange(x, "b c t h w -> (b t) (c h w)"))
        outputs["ta"].append(ta)
        outputs["sa"].append(sa)
        done += b
        i += 1

    records = [
        _parity_record(Modality.VIDEO, torch.cat(outputs["tv"]), torch.cat(outputs["sv"]), cfg, total),
        _parity_record(Modality.AUDIO, torch.cat(outputs["ta"]), torch.cat(outputs["sa"]), cfg, total),
    ]
    for r in records:
        logger.info(
            f"[Parity] {r.modality}: {r.student_steps}-step student vs {r.teacher_steps}-step teacher "
            f"over {r.n_samples} samples, mean error {r.mean_error:.3f}, variance ratio "
            f"[{r.variance_ratio_min:.3f}, {r.variance_ratio_max:.3f}]"
        )
    return records
