"""Chunk-wise streaming inference and the long-horizon drift metric.

Per chunk the engine runs four stages: preprocess (transcript window,
history, sink and motion context), generate (student sampling, pointer
advance and the commit to the rollout state), decode (toy codecs) and
write. Generated motion latents are reused directly, never re-encoded.
"""

import asyncio
from dataclasses import dataclass, replace
from pathlib import Path
from time import perf_counter
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch
from einops import rearrange
from loguru import logger

from avs.core.config import RunConfig
from avs.core.logger import log_chunk
from avs.models.latent import LatentBlock, Modality, Provenance
from avs.models.report import AblationRecord, DriftRecord, LatencyRecord, StreamReport
from avs.models.rollout import RolloutState
from avs.models.world import HistoryBuffer, SynthSample
from avs.parsers.stream_container import AsyncStreamWriter, ChunkRecord, StreamHeader
from avs.services.bundle import NetworkBundle
from avs.services.codec import ToyCodec
from avs.services.generator import ChunkContext, Script, commit_chunk, make_noise, rollout_context
from avs.services.synthworld import character_identity, hashed_seed, make_stream, reference_audio


@dataclass(frozen=True)
class EndOfStream:
    """The transcript is exhausted; no further chunk will be produced."""

    chunk_index: int
    cursor: float
    n_tokens: int


def _timed(fn: Callable[..., Any], *args: Any) -> tuple[Any, float]:
    start = perf_counter()
    out = fn(*args)
    return out, perf_counter() - start


class StreamEngine:
    """
    Streams one transcript chunk by chunk with a (distilled) student.

    Args:
        run: Run configuration
        bundle: Networks; the denoiser is the student
        script: Transcript and speaker
        sink: Keep chunk 1 as sink memory (defaults to ``run.stream.sink``)
        overlap: Overlap decode(k) with preprocess(k+1) in ``run``
        n_steps: Sampler steps (defaults to the student's)
        seed: Noise seed of the stream
        codec: Codec pair; a fresh ToyCodec when omitted
    """

    def __init__(
        self,
        run: RunConfig,
        bundle: NetworkBundle,
        script: Script,
        *,
        sink: Optional[bool] = None,
        overlap: Optional[bool] = None,
        n_steps: Optional[int] = None,
        seed: int = 0,
        codec: Optional[ToyCodec] = None,
    ):
        self.config = run
        self.generator = bundle.generator()
        self.script = script
        self.sink = run.stream.sink if sink is None else sink
        self.overlap = run.stream.overlap if overlap is None else overlap
        self.n_steps = run.distill.student_steps if n_steps is None else n_steps
        self.schedule = run.distill.student_schedule if self.n_steps == run.distill.student_steps else None
        self.seed = seed
        self.codec = codec or ToyCodec(run.world)
        self.dtype = next(bundle.denoiser.parameters()).dtype
        self.state = RolloutState(history=HistoryBuffer.empty(run.world.audio_channels, self.dtype))
        self.ref_audio = reference_audio(
            run.world, hashed_seed("ref", seed, script.prompt_id), run.orchestrator.ref_audio_frames
        ).data
        self.records: list[ChunkRecord] = []

    @classmethod
    def from_transcript(
        cls, run: RunConfig, bundle: NetworkBundle, tokens: Sequence[int], prompt_id: int = 0, **kwargs
    ) -> "StreamEngine":
        identity = torch.from_numpy(character_identity(run.world, prompt_id))
        return cls(run, bundle, Script(tuple(int(t) for t in tokens), prompt_id, identity), **kwargs)

    @classmethod
    def from_sample(cls, run: RunConfig, bundle: NetworkBundle, sample: SynthSample, **kwargs) -> "StreamEngine":
        return cls(run, bundle, Script.of(sample), **kwargs)

    @property
    def n_tokens(self) -> int:
        return self.script.n_tokens

    @property
    def finished(self) -> bool:
        return self.state.finished(self.n_tokens)

    def header(self) -> StreamHeader:
        return StreamHeader(
            config=self.config, transcript=self.script.tokens, prompt_id=self.script.prompt_id, sink=self.sink
        )

    def end_of_stream(self) -> EndOfStream:
        return EndOfStream(self.state.chunk_index, self.state.cursor, self.n_tokens)

    # -- stages -------------------------------------------------------------

    @torch.no_grad()
    def preprocess(self) -> Optional[ChunkContext]:
        """Conditioning of the next chunk, or None once the transcript is exhausted."""
        if self.finished:
            return None
        return rollout_context(self.config, [self.state], [self.script], [self.ref_audio], self.sink)

    @torch.no_grad()
    def generate(self, ctx: ChunkContext) -> tuple[torch.Tensor, torch.Tensor]:
        """Sample the chunk, advance the pointer and commit the rollout state."""
        g = self.config.geometry
        c, (h, w) = self.config.world.video_channels, self.config.world.video_spatial
        noise_v, noise_a = make_noise(
            (1, c, g.video_frames, h, w),
            (1, g.audio_frames, self.config.world.audio_channels),
            hashed_seed("stream", self.seed, self.state.chunk_index),
            self.dtype,
        )
        x_v, x_a = self.generator.sample(ctx, self.n_steps, self.schedule, noise_v=noise_v, noise_a=noise_a)
        out = self.generator.point(ctx, x_a)[0]
        end = ctx.samples[0].window.to_global(float(out.s_hat))
        commit_chunk(self.config, self.state, x_v[0], x_a[0], end, self.n_tokens, self.sink)
        return x_v[0], x_a[0]

    @torch.no_grad()
    def decode(self, video: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        """Decoded toy frames of the chunk; the audio is decoded for playback only."""
        frames = self.codec.decode(LatentBlock(Modality.VIDEO, video, Provenance.GENERATED))
        self.codec.decode(LatentBlock(Modality.AUDIO, audio, Provenance.GENERATED))
        return frames

    def _record(
        self,
        video: torch.Tensor,
        audio: torch.Tensor,
        frames: torch.Tensor,
        stages: tuple[float, float, float],
    ) -> ChunkRecord:
        generate_s, decode_s, preprocess_s = stages
        latency = LatencyRecord(
            chunk_index=self.state.chunk_index - 1,
            cursor=self.state.cursor,
            generate_s=generate_s,
            decode_s=decode_s,
            preprocess_s=preprocess_s,
            budget_s=self.config.geometry.budget_s,
        )
        return ChunkRecord(latency=latency, video=video.float(), audio=audio.float(), frames=frames.float())

    def _close(self, record: ChunkRecord, write_s: float, wall_s: float) -> ChunkRecord:
        latency = record.latency.model_copy(update={"write_s": write_s, "wall_s": wall_s})
        log_chunk(latency.chunk_index, latency.cursor, latency.wall_s, latency.budget_s)
        closed = replace(record, latency=latency)
        self.records.append(closed)
        return closed

    def step(self) -> ChunkRecord | EndOfStream:
        """Run one chunk through all four stages sequentially."""
        start = perf_counter()
        ctx, pre_s = _timed(self.preprocess)
        if ctx is None:
            return self.end_of_stream()
        (video, audio), gen_s = _timed(self.generate, ctx)
        frames, dec_s = _timed(self.decode, video, audio)
        record, write_s = _timed(self._record, video, audio, frames, (gen_s, dec_s, pre_s))
        return self._close(record, write_s, perf_counter() - start)

    async def run(self, max_chunks: int, container: Optional[Path] = None) -> StreamReport:
        """
        Pipelined streaming of up to ``max_chunks`` chunks.

        The first chunk pays its own preprocessing; afterwards, with overlap,
        the next chunk's preprocessing runs alongside the current decode.
        Generation of chunk k+1 starts only after chunk k is committed.
        """
        report = StreamReport(n_tokens=self.n_tokens, sink=self.sink)
        writer = AsyncStreamWriter(container, self.header()) if container is not None else None
        if writer is not None:
            await writer.__aenter__()
        try:
            last = perf_counter()
            ctx, pre_s = _timed(self.preprocess)
            produced = 0
            while ctx is not None and produced < max_chunks:
                (video, audio), gen_s = _timed(self.generate, ctx)
                if self.overlap:
                    (frames, dec_s), (next_ctx, next_pre) = await asyncio.gather(
                        asyncio.to_thread(_timed, self.decode, video, audio),
                        asyncio.to_thread(_timed, self.preprocess),
                    )
                else:
                    frames, dec_s = _timed(self.decode, video, audio)
                    next_ctx, next_pre = _timed(self.preprocess)

                write_start = perf_counter()
                record = self._record(video, audio, frames, (gen_s, dec_s, pre_s))
                if writer is not None:
                    await writer.write(record)
                now = perf_counter()
                self._close(record, now - write_start, now - last)
                produced += 1
                last = now
                ctx, pre_s = next_ctx, next_pre
        finally:
            if writer is not None:
                await writer.__aexit__(None, None, None)

        if ctx is None:
            eos = self.end_of_stream()
            logger.info(
                f"[Stream] end of stream after {eos.chunk_index} chunks, "
                f"cursor {eos.cursor:.3f}/{eos.n_tokens}"
            )
        report.n_chunks = len(self.records)
        report.final_cursor = self.state.cursor
        report.latencies = [r.latency for r in self.records]
        report.container = None if container is None else str(container)
        report.finalize()
        return report

    def video(self) -> Optional[torch.Tensor]:
        """All generated video latents (C, T, H, W)."""
        if not self.records:
            return None
        return torch.cat([r.video for r in self.records], dim=1)


# ---------------------------------------------------------------------------
# Quality proxy and drift
# ---------------------------------------------------------------------------


def quality_proxy(
    video: torch.Tensor, reference: tuple[torch.Tensor, torch.Tensor], fps: float
) -> list[float]:
    """
    Per-second quality of video latents (C, T, H, W).

    Each full second scores the negative distance between its per-channel
    mean/variance and the world's reference statistics; a trailing partial
    second is dropped.
    """
    per = int(round(fps))
    seconds = video.shape[1] // per
    if seconds == 0:
        return []
    clip = rearrange(video[:, : seconds * per].double(), "c (s f) h w -> s c (f h w)", f=per)
    mean_ref, var_ref = (r.double() for r in reference)
    mean = clip.mean(dim=-1)
    var = clip.var(dim=-1, unbiased=False)
    dist = ((mean - mean_ref) ** 2).sum(dim=-1) + ((var - var_ref) ** 2).sum(dim=-1)
    return [-float(d) for d in torch.sqrt(dist)]


def drift_records(
    series: Sequence[float], segment_s: float = 30.0, probe_s: float = 5.0
) -> list[DriftRecord]:
    """
    |mean(last probe of each segment) - mean(first probe of the stream)| for
    every segment end 30, 60, ... within a per-second series.
    """
    seg, probe = int(round(segment_s)), int(round(probe_s))
    if probe < 1 or seg < probe:
        raise ValueError(f"need 1 <= probe_s <= segment_s, got {probe_s}, {segment_s}")
    q = np.asarray(series, dtype=np.float64)
    if q.shape[0] < seg:
        raise ValueError(f"series of {q.shape[0]} s is shorter than one {seg} s segment")
    baseline = float(q[:probe].mean())
    out = []
    for end in range(seg, q.shape[0] + 1, seg):
        probe_mean = float(q[end - probe : end].mean())
        out.append(
            DriftRecord(
                segment_end_s=float(end),
                probe_mean=probe_mean,
                baseline_mean=baseline,
                difference=abs(probe_mean - baseline),
            )
        )
    return out


def drift(series: Sequence[float], segment_s: float = 30.0, probe_s: float = 5.0) -> float:
    """Maximum segment drift over the whole series."""
    return max(r.difference for r in drift_records(series, segment_s, probe_s))


def stream_drift(
    run: RunConfig, video: Optional[torch.Tensor], reference: tuple[torch.Tensor, torch.Tensor]
) -> tuple[Optional[float], list[DriftRecord]]:
    """Drift of a generated stream, or None when it is shorter than one segment."""
    if video is None:
        return None, []
    series = quality_proxy(video, reference, run.world.latent_video_fps)
    if len(series) < run.stream.segment_s:
        logger.warning(
            f"[Stream] {len(series)} s of video is shorter than one {run.stream.segment_s:g} s "
            "segment, drift not computed"
        )
        return None, []
    records = drift_records(series, run.stream.segment_s, run.stream.probe_s)
    return max(r.difference for r in records), records


def sink_ablation(
    run: RunConfig,
    bundle: NetworkBundle,
    seeds: Sequence[int],
    n_chunks: int,
    reference: tuple[torch.Tensor, torch.Tensor],
) -> list[AblationRecord]:
    """
    Paired-seed drift with and without the sink chunk.

    Both runs of a pair share transcript, speaker and sampling noise; only
    the sink flag differs.
    """
    n_tok = max(run.stream.transcript_tokens, 1)
    out = []
    for seed in seeds:
        sample = make_stream(run.world, run.geometry, n_tok, hashed_seed("ablation", run.seed, seed)).sample
        drifts = {}
        for sink in (True, False):
            engine = StreamEngine.from_sample(run, bundle, sample, sink=sink, overlap=False, seed=seed)
            asyncio.run(engine.run(n_chunks))
            value, _ = stream_drift(run, engine.video(), reference)
            drifts[sink] = float("nan") if value is None else value
        record = AblationRecord(
            seed=seed, n_chunks=n_chunks, drift_with_sink=drifts[True], drift_without_sink=drifts[False]
        )
        logger.info(
            f"[Ablation] seed {seed}: drift {record.drift_with_sink:.5f} with sink, "
            f"{record.drift_without_sink:.5f} without"
        )
        out.append(record)
    return out

