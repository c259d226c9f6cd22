"""Chunk generation: orchestrator + denoiser + pointer wired together.

Shared by teacher pretraining, both distillation stages and streaming.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from loguru import logger

from avs.core.config import RunConfig, WorldConfig
from avs.models.latent import LatentBlock, Modality, Provenance
from avs.models.rollout import RolloutState
from avs.models.world import HistoryBuffer, SynthSample
from avs.networks.jointnet import JointDenoiser, KVCache, pack
from avs.networks.orchestrator import AudioCondition, Orchestrator, OrchestratorInput, truncate_history
from avs.networks.pap import PointerOutput, ProgressPointer, truncate_transcript
from avs.services import flow
from avs.services.synthworld import WorldStream, gen_sample, hashed_seed, reference_audio


@dataclass(frozen=True)
class TextWindow:
    """Visible slice of the transcript; ``offset`` is the global index of ``tokens[0]``."""

    tokens: torch.Tensor
    offset: int

    @property
    def n(self) -> int:
        return int(self.tokens.shape[0])

    def to_local(self, position: float) -> float:
        return min(max(position - self.offset, 0.0), float(self.n))

    def to_global(self, position: float) -> float:
        return self.offset + position

    def truncated(self, local_end: float) -> "TextWindow":
        """Keep the first ceil(local_end) tokens."""
        kept = truncate_transcript(self.tokens.tolist(), local_end)
        return TextWindow(torch.tensor(kept, dtype=torch.long), self.offset)


def text_window(
    transcript: Sequence[int], history: HistoryBuffer, cursor: float, lookahead: int
) -> TextWindow:
    """
    Transcript tokens from the oldest buffered history token up to
    ``lookahead`` tokens past the cursor.
    """
    n = len(transcript)
    if n == 0:
        raise ValueError("empty transcript")
    start = history.token_index[0] if history.token_index else int(math.floor(cursor))
    start = min(start, n - 1)
    stop = max(min(n, int(math.ceil(cursor)) + lookahead), start + 1)
    return TextWindow(torch.tensor(list(transcript[start:stop]), dtype=torch.long), start)


@dataclass(frozen=True)
class SampleContext:
    """Per-sample orchestrator inputs that stay fixed while a chunk is denoised."""

    ref_audio: torch.Tensor
    window: TextWindow
    history: torch.Tensor
    prompt_id: int


@dataclass(frozen=True)
class ChunkContext:
    """Conditioning of one batched chunk."""

    ref_video: torch.Tensor  # (B, C, 1, H, W)
    sink: Optional[torch.Tensor]  # (B, C, S, H, W)
    motion: Optional[torch.Tensor]  # (B, C, K, H, W)
    samples: tuple[SampleContext, ...]

    @property
    def batch_size(self) -> int:
        return len(self.samples)

    @property
    def prompt_ids(self) -> torch.Tensor:
        return torch.tensor([s.prompt_id for s in self.samples], dtype=torch.long)

    def with_windows(self, windows: Sequence[TextWindow]) -> "ChunkContext":
        samples = tuple(
            SampleContext(s.ref_audio, w, s.history, s.prompt_id)
            for s, w in zip(self.samples, windows, strict=True)
        )
        return ChunkContext(self.ref_video, self.sink, self.motion, samples)


def identity_video(identity: torch.Tensor, spatial: tuple[int, int]) -> torch.Tensor:
    """Reference image latent (C, 1, H, W): the identity code broadcast over space."""
    h, w = spatial
    return identity[:, None, None, None].expand(-1, 1, h, w).contiguous()


def reference_video(sample: SynthSample, spatial: tuple[int, int]) -> torch.Tensor:
    return identity_video(sample.identity, spatial)


def _stack(blocks: Sequence[Optional[torch.Tensor]]) -> Optional[torch.Tensor]:
    if any(b is None for b in blocks):
        return None
    return torch.stack(list(blocks))


class ChunkGenerator:
    """
    Velocity field and sampler for one chunk.

    Args:
        denoiser: Joint audio-video denoiser
        orchestrator: Produces c_a from transcript, history and noisy audio
        pointer: Progress-aware pointer over the transcript window
        world: World geometry
    """

    def __init__(
        self,
        denoiser: JointDenoiser,
        orchestrator: Orchestrator,
        pointer: ProgressPointer,
        world: WorldConfig,
    ):
        self.denoiser = denoiser
        self.orchestrator = orchestrator
        self.pointer = pointer
        self.world = world

    def with_denoiser(self, denoiser: JointDenoiser) -> "ChunkGenerator":
        return ChunkGenerator(denoiser, self.orchestrator, self.pointer, self.world)

    def conditions(
        self, ctx: ChunkContext, x_a: torch.Tensor, t: float | torch.Tensor
    ) -> list[AudioCondition]:
        """Orchestrator outputs for every sample of the batch."""
        t_vec = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        if t_vec.shape[0] == 1:
            t_vec = t_vec.expand(ctx.batch_size)
        out = []
        for i, s in enumerate(ctx.samples):
            inp = OrchestratorInput(
                ref_audio=s.ref_audio.to(x_a.dtype),
                transcript=s.window.tokens,
                history_audio=s.history.to(x_a.dtype),
                x_t_a=x_a[i],
                t=float(t_vec[i]),
                prompt_id=s.prompt_id,
            )
            out.append(self.orchestrator.condition(inp))
        return out

    def audio_condition(self, ctx: ChunkContext, x_a: torch.Tensor, t: float | torch.Tensor) -> torch.Tensor:
        """Stacked c_a (B, T, D)."""
        return torch.stack([c.c_a for c in self.conditions(ctx, x_a, t)])

    def _pack(self, ctx: ChunkContext, x_v: torch.Tensor, x_a: torch.Tensor, c_a: torch.Tensor):
        dtype = x_v.dtype
        return pack(
            ctx.ref_video.to(dtype),
            None if ctx.motion is None else ctx.motion.to(dtype),
            None if ctx.sink is None else ctx.sink.to(dtype),
            x_v,
            x_a,
            c_a,
            audio_per_video=self.world.audio_per_video,
        )

    def build_cache(self, ctx: ChunkContext, x_v: torch.Tensor, x_a: torch.Tensor) -> KVCache:
        """Condition KV cache for a chunk; independent of the noisy latents and t."""
        c_a = x_a.new_zeros(*x_a.shape[:2], self.orchestrator.dim)
        return self.denoiser.build_cache(self._pack(ctx, x_v, x_a, c_a), ctx.prompt_ids)

    def velocity(
        self,
        x_v: torch.Tensor,
        x_a: torch.Tensor,
        t: float | torch.Tensor,
        ctx: ChunkContext,
        cache: Optional[KVCache] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        c_a = self.audio_condition(ctx, x_a, t)
        return self.denoiser(self._pack(ctx, x_v, x_a, c_a), t, ctx.prompt_ids, cache)

    def sample(
        self,
        ctx: ChunkContext,
        n_steps: int,
        schedule: Optional[Sequence[float]] = None,
        *,
        noise_v: torch.Tensor,
        noise_a: torch.Tensor,
        use_cache: bool = True,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Euler-sample one chunk from noise; the condition KV cache is built once."""
        cache = self.build_cache(ctx, noise_v, noise_a) if use_cache else None

        def field(x_v, x_a, t, c):
            return self.velocity(x_v, x_a, t, c, cache)

        return flow.sample(field, ctx, n_steps, schedule, noise_v=noise_v, noise_a=noise_a)

    def point(self, ctx: ChunkContext, z_a: torch.Tensor) -> list[PointerOutput]:
        """Pointer outputs on clean audio (orchestrator evaluated at t = 0)."""
        conds = self.conditions(ctx, z_a, 0.0)
        return [self.pointer(c.text_states, c.c_a) for c in conds]


def make_noise(
    shape_v: tuple[int, ...], shape_a: tuple[int, ...], seed: int, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed % (2**63))
    return (
        torch.randn(shape_v, generator=gen, dtype=dtype),
        torch.randn(shape_a, generator=gen, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# Ground-truth training chunks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingBatch:
    """Clean chunk latents with their ground-truth context and endpoint labels."""

    ctx: ChunkContext
    z_v: torch.Tensor  # (B, C, T, H, W)
    z_a: torch.Tensor  # (B, T_a, C_a)
    endpoints: tuple[float, ...]  # window-local ground-truth endpoints


def min_tokens_for(run: RunConfig, n_chunks: int) -> int:
    """Transcript length guaranteeing at least ``n_chunks`` full chunks."""
    lo = run.world.token_duration_range[0]
    return math.ceil(n_chunks * run.geometry.audio_frames / lo)


def ground_truth_context(
    run: RunConfig, stream: WorldStream, k: int, seed: int
) -> tuple[SampleContext, float]:
    """Orchestrator context for chunk k of a world stream and its local endpoint label."""
    history = truncate_history(
        stream.history(k), run.orchestrator.history_cap_s, run.world.latent_audio_rate
    )
    cursor = stream.endpoint(k - 1) if k > 0 else 0.0
    window = text_window(stream.sample.tokens, history, cursor, run.orchestrator.text_window)
    ref_audio = reference_audio(run.world, seed, run.orchestrator.ref_audio_frames).data
    sc = SampleContext(ref_audio, window, history.audio, stream.sample.prompt_id)
    return sc, window.to_local(stream.endpoint(k))


def ground_truth_batch(
    run: RunConfig,
    batch_seed: int,
    batch_size: int,
    context_prob: float,
    token_range: tuple[int, int],
) -> TrainingBatch:
    """
    Draw ``batch_size`` world chunks; with probability ``context_prob`` the
    whole batch also carries ground-truth sink and motion context.
    """
    rng = np.random.default_rng([run.seed, batch_seed])
    use_context = bool(rng.random() < context_prob)
    floor_tokens = min_tokens_for(run, 2)
    g = run.geometry
    refs, sinks, motions, zs_v, zs_a, samples, ends = [], [], [], [], [], [], []
    for i in range(batch_size):
        n_tok = max(int(rng.integers(token_range[0], token_range[1] + 1)), floor_tokens)
        seed = hashed_seed("batch", run.seed, batch_seed, i)
        stream = WorldStream(gen_sample(run.world, n_tok, seed), g)
        k = int(rng.integers(1 if use_context else 0, stream.n_chunks))
        sc, end = ground_truth_context(run, stream, k, seed)
        refs.append(reference_video(stream.sample, run.world.video_spatial))
        sinks.append(stream.video_chunk(0).data if use_context else None)
        motions.append(stream.video_chunk(k - 1).tail(g.motion_frames).data if use_context else None)
        zs_v.append(stream.video_chunk(k).data)
        zs_a.append(stream.audio_chunk(k).data)
        samples.append(sc)
        ends.append(end)
    ctx = ChunkContext(
        ref_video=torch.stack(refs),
        sink=_stack(sinks),
        motion=_stack(motions),
        samples=tuple(samples),
    )
    return TrainingBatch(ctx, torch.stack(zs_v), torch.stack(zs_a), tuple(ends))


# ---------------------------------------------------------------------------
# Rollout state handling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Script:
    """What a stream has to say and who says it."""

    tokens: tuple[int, ...]
    prompt_id: int
    identity: torch.Tensor

    @classmethod
    def of(cls, sample: SynthSample) -> "Script":
        return cls(sample.tokens, sample.prompt_id, sample.identity)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


def rollout_context(
    run: RunConfig,
    states: Sequence[RolloutState],
    scripts: Sequence[Script],
    ref_audio: Sequence[torch.Tensor],
    sink: bool,
) -> ChunkContext:
    """Context of the next chunk from each stream's rollout state."""
    contexts = []
    for state, script, ref in zip(states, scripts, ref_audio, strict=True):
        window = text_window(script.tokens, state.history, state.cursor, run.orchestrator.text_window)
        contexts.append(SampleContext(ref, window, state.history.audio, script.prompt_id))
    use_sink = sink and all(s.sink is not None for s in states)
    has_motion = all(s.motion is not None and s.motion.frames > 0 for s in states)
    return ChunkContext(
        ref_video=torch.stack([identity_video(s.identity, run.world.video_spatial) for s in scripts]),
        sink=torch.stack([s.sink.data for s in states]) if use_sink else None,
        motion=torch.stack([s.motion.data for s in states]) if has_motion else None,
        samples=tuple(contexts),
    )


def commit_chunk(
    run: RunConfig,
    state: RolloutState,
    video: torch.Tensor,
    audio: torch.Tensor,
    endpoint_global: float,
    n_tokens: int,
    keep_sink: bool,
) -> tuple[float, float]:
    """
    Commit a generated chunk to the rollout state.

    Advances the cursor (non-decreasing, at most N), appends the audio to the
    history and truncates it to the cap, stores the sink after the first
    chunk and replaces the motion latents with this chunk's own latents.

    Returns:
        (cursor before, cursor after)
    """
    video_block = LatentBlock(Modality.VIDEO, video.detach(), Provenance.GENERATED)
    audio_block = LatentBlock(Modality.AUDIO, audio.detach(), Provenance.GENERATED)
    cursor_from = state.cursor
    cursor_to = state.advance_cursor(endpoint_global, n_tokens)
    state.history.append_chunk(audio_block.data, cursor_from, cursor_to, n_tokens)
    state.history = truncate_history(
        state.history, run.orchestrator.history_cap_s, run.world.latent_audio_rate
    )
    if state.chunk_index == 0 and keep_sink:
        state.set_sink(video_block)
    state.motion = video_block.tail(run.geometry.motion_frames)
    state.provenance_log.append(state.motion.provenance)
    state.chunk_index += 1
    logger.debug(
        f"[Rollout] chunk {state.chunk_index} committed, cursor {cursor_from:.3f} -> {cursor_to:.3f}, "
        f"history {state.history.frames} frames"
    )
    return cursor_from, cursor_to
