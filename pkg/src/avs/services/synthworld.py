"""Procedural synthetic character world.

Plays the part of datasets, VAEs and ASR: every sample comes with an exact
transcript-audio alignment, so endpoint labels and WER-proxies are exact.
"""

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import torch
from loguru import logger

from avs.core.config import ChunkGeometry, WorldConfig
from avs.models.latent import LatentBlock, Modality
from avs.models.world import HistoryBuffer, SynthSample

# Frames the last token may be stretched by so the audio length is a multiple of 4.
MAX_TAIL_PAD = 3
ENERGY_EMA = 0.5
REFERENCE_SALT = 0x5EED


def hashed_seed(*parts: int | str) -> int:
    """64-bit seed from a keyed hash of its parts."""
    key = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


@lru_cache(maxsize=4096)
def _signature_template(world_seed: int, token_id: int, length: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng(hashed_seed("token", world_seed, token_id))
    template = rng.standard_normal((length, channels)).astype(np.float32)
    template.setflags(write=False)
    return template


def signature_length(cfg: WorldConfig) -> int:
    """Longest duration any token can take (tail padding included)."""
    return cfg.token_duration_range[1] + MAX_TAIL_PAD


def token_signature(cfg: WorldConfig, token_id: int, duration: int) -> np.ndarray:
    """
    Audio signature of a token spoken for ``duration`` frames.

    Each token id expands, through a seeded hash, to a fixed template; a
    duration-d occurrence is the template's first d frames.
    """
    length = signature_length(cfg)
    if not 1 <= duration <= length:
        raise ValueError(f"duration {duration} outside [1, {length}]")
    return _signature_template(cfg.seed, token_id, length, cfg.audio_channels)[:duration]


def character_identity(cfg: WorldConfig, character: int) -> np.ndarray:
    """Identity code of a character (one per prompt id)."""
    rng = np.random.default_rng(hashed_seed("identity", cfg.seed, character))
    return rng.standard_normal(cfg.video_channels).astype(np.float32)


def spatial_pattern(cfg: WorldConfig) -> np.ndarray:
    """World-fixed (channels, H, W) pattern modulated by audio energy."""
    rng = np.random.default_rng(hashed_seed("pattern", cfg.seed))
    h, w = cfg.video_spatial
    return rng.standard_normal((cfg.video_channels, h, w)).astype(np.float32)


def audio_to_video(cfg: WorldConfig, audio: np.ndarray, identity: np.ndarray) -> np.ndarray:
    """
    Video latents driven by audio: per-frame energy, causally smoothed
    (EMA 0.5), modulating a spatial pattern on top of the identity code.
    """
    ratio = cfg.audio_per_video
    n_video = audio.shape[0] // ratio
    energy = (audio.astype(np.float64) ** 2).mean(axis=1) - 1.0
    per_frame = energy[: n_video * ratio].reshape(n_video, ratio).mean(axis=1)
    smooth = np.empty(n_video, dtype=np.float64)
    state = per_frame[0] if n_video else 0.0
    for k in range(n_video):
        state = ENERGY_EMA * state + (1.0 - ENERGY_EMA) * per_frame[k]
        smooth[k] = state
    pattern = spatial_pattern(cfg).astype(np.float64)
    video = identity.astype(np.float64)[:, None, None, None] + (
        smooth[None, :, None, None] * pattern[:, None, :, :]
    )
    return video.astype(np.float32)


def gen_sample(cfg: WorldConfig, n_tokens: int, rng_seed: int) -> SynthSample:
    """
    Generate one synthetic sample.

    Args:
        cfg: World configuration
        n_tokens: Transcript length (>= 1)
        rng_seed: Sample seed; identical (cfg, n_tokens, seed) give identical samples

    Returns:
        SynthSample with exact alignment
    """
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")

    rng = np.random.default_rng([cfg.seed, rng_seed])
    lo, hi = cfg.token_duration_range
    tokens = rng.integers(0, cfg.vocab_size, size=n_tokens)
    durations = rng.integers(lo, hi + 1, size=n_tokens)
    durations[-1] += (-int(durations.sum())) % cfg.audio_per_video

    audio = np.concatenate(
        [token_signature(cfg, int(t), int(d)) for t, d in zip(tokens, durations, strict=True)]
    )
    prompt_id = int(rng.integers(0, cfg.n_characters))
    identity = character_identity(cfg, prompt_id) + 0.1 * rng.standard_normal(
        cfg.video_channels
    ).astype(np.float32)
    video = audio_to_video(cfg, audio, identity)

    return SynthSample(
        tokens=tuple(int(t) for t in tokens),
        durations=tuple(int(d) for d in durations),
        audio=LatentBlock(Modality.AUDIO, torch.from_numpy(audio)),
        video=LatentBlock(Modality.VIDEO, torch.from_numpy(video)),
        identity=torch.from_numpy(identity),
        prompt_id=prompt_id,
    )


def reference_audio(cfg: WorldConfig, rng_seed: int, frames: int) -> LatentBlock:
    """The character's reference utterance, independent of the sample content."""
    ref = gen_sample(cfg, max(1, frames // cfg.token_duration_range[0] + 1), rng_seed ^ REFERENCE_SALT)
    return ref.audio.slice_frames(0, frames)


def endpoint_at(durations: tuple[int, ...] | list[int], frame: int) -> float:
    """
    Transcript position reached after ``frame`` audio frames: tokens fully
    spoken plus the fraction of the active token consumed.
    """
    cum = np.cumsum(durations)
    n = len(durations)
    if n == 0:
        return 0.0
    full = int(np.searchsorted(cum, frame, side="right"))
    if full >= n:
        return float(n)
    start = int(cum[full - 1]) if full > 0 else 0
    return full + (frame - start) / durations[full]


def chunk_endpoints(sample: SynthSample, chunk_audio_frames: int) -> list[float]:
    """
    Ground-truth endpoint index per chunk.

    The last chunk may be shorter; its endpoint is N.
    """
    if chunk_audio_frames < 1:
        raise ValueError(f"chunk_audio_frames must be >= 1, got {chunk_audio_frames}")
    total = sum(sample.durations)
    bounds = list(range(chunk_audio_frames, total, chunk_audio_frames)) + [total]
    return [endpoint_at(sample.durations, b) for b in bounds]


@dataclass(frozen=True)
class WorldStream:
    """A long sample seen as a sequence of fixed-size chunks."""

    sample: SynthSample
    geometry: ChunkGeometry

    @property
    def n_chunks(self) -> int:
        return self.sample.video.frames // self.geometry.video_frames

    def video_chunk(self, k: int) -> LatentBlock:
        v = self.geometry.video_frames
        return self.sample.video.slice_frames(k * v, (k + 1) * v)

    def audio_chunk(self, k: int) -> LatentBlock:
        a = self.geometry.audio_frames
        return self.sample.audio.slice_frames(k * a, (k + 1) * a)

    def endpoint(self, k: int) -> float:
        """Ground-truth transcript position at the end of chunk k."""
        return endpoint_at(self.sample.durations, (k + 1) * self.geometry.audio_frames)

    def history(self, k: int) -> HistoryBuffer:
        """Aligned ground-truth history preceding chunk k."""
        return HistoryBuffer.from_alignment(
            self.sample.audio.data, self.sample.durations, k * self.geometry.audio_frames
        )


def make_stream(
    cfg: WorldConfig, geometry: ChunkGeometry, n_tokens: int, rng_seed: int
) -> WorldStream:
    """Generate a sample and wrap it as a chunk stream."""
    return WorldStream(gen_sample(cfg, n_tokens, rng_seed), geometry)


def decode_tokens(cfg: WorldConfig, audio: np.ndarray) -> list[int]:
    """
    Nearest-signature decoding of an audio latent sequence.

    Dynamic programming over (token, duration) segment hypotheses; returns
    the token sequence with minimal total squared distance to the
    signatures.
    """
    n_frames = audio.shape[0]
    if n_frames == 0:
        return []
    length = signature_length(cfg)
    lo = cfg.token_duration_range[0]
    templates = np.stack(
        [_signature_template(cfg.seed, v, length, cfg.audio_channels) for v in range(cfg.vocab_size)]
    ).astype(np.float64)
    x = audio.astype(np.float64)

    # err[v, f, r] = ||x[f + r] - template_v[r]||^2, inf past the end
    padded = np.concatenate([x, np.full((length, x.shape[1]), np.nan)])
    windows = np.stack([padded[r : r + n_frames] for r in range(length)], axis=1)
    err = ((windows[None] - templates[:, None]) ** 2).sum(axis=-1)
    err = np.nan_to_num(err, nan=np.inf)
    seg = np.cumsum(err, axis=2)  # seg[v, f, d-1] = cost of duration d

    best = np.full(n_frames + 1, np.inf)
    best[0] = 0.0
    back: list[tuple[int, int]] = [(-1, -1)] * (n_frames + 1)
    for f in range(n_frames):
        if not np.isfinite(best[f]):
            continue
        for d in range(lo, min(length, n_frames - f) + 1):
            costs = seg[:, f, d - 1]
            v = int(np.argmin(costs))
            total = best[f] + costs[v]
            if total < best[f + d]:
                best[f + d] = total
                back[f + d] = (v, d)

    if not np.isfinite(best[n_frames]):
        # Too short for any full segmentation; fall back to the best single guess.
        logger.debug(f"[World] no full segmentation for {n_frames} frames")
        return [int(np.argmin(seg[:, 0, min(length, n_frames) - 1]))]

    out: list[int] = []
    f = n_frames
    while f > 0:
        v, d = back[f]
        out.append(v)
        f -= d
    return out[::-1]


def reference_stats(
    cfg: WorldConfig, n_samples: int = 1000, n_tokens: int = 16, seed: Optional[int] = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and variance of world video latents."""
    base = cfg.seed if seed is None else seed
    frames = []
    for i in range(n_samples):
        s = gen_sample(cfg, n_tokens, hashed_seed("stats", base, i))
        v = s.video.data
        frames.append(v.reshape(v.shape[0], -1))
    allv = torch.cat(frames, dim=1).double()
    return allv.mean(dim=1), allv.var(dim=1, unbiased=False)
