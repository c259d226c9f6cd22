"""Joint audio-video denoiser.

Sequence layout (prompt tokens are prepended by ``forward``):

    [prompt | ref | sink | motion | x_v | x_a]

Condition tokens (prompt, ref, sink, motion) are clean, carry the t = 0
timestep embedding and may only attend to each other, so their keys and
values can be computed once per chunk and reused by every denoising step.
"""

import hashlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import torch
from einops import rearrange
from loguru import logger
from torch import nn

from avs.core.config import DenoiserConfig, WorldConfig
from avs.core.errors import ShapeMismatchError, StaleCacheError
from avs.models.latent import CONDITION_ROLES, NOISY_ROLES, ROLE_IDS, Modality, Role, TokenStream
from avs.networks.layers import Attention, FeedForward, TimestepEmbedder, TransformerBlock, seeded
from avs.networks.rope import PositionAssignment, assign_positions, default_sink_offset


def build_mask(roles: tuple[Role, ...] | list[Role]) -> torch.Tensor:
    """
    Asymmetric attention permissions (True = row may attend to column).

    Noisy rows see every token; condition rows see condition tokens only.

    Raises:
        ValueError: for roles that cannot appear in a denoiser sequence
    """
    is_cond = []
    for role in roles:
        if role in CONDITION_ROLES:
            is_cond.append(True)
        elif role in NOISY_ROLES:
            is_cond.append(False)
        else:
            raise ValueError(f"role {role!r} is not valid inside a denoiser sequence")
    cond = torch.tensor(is_cond, dtype=torch.bool)
    n = cond.shape[0]
    return torch.where(cond[:, None], cond[None, :].expand(n, n), torch.ones(n, n, dtype=torch.bool))


@dataclass(frozen=True)
class PackedSequence:
    """
    One chunk packed for the denoiser.

    Video tensors are ``(B, C, T, H, W)``, audio tensors ``(B, T, C)``.
    ``tokens``, ``mask`` and ``positions`` describe the sequence without
    prompt tokens.
    """

    tokens: TokenStream
    mask: torch.Tensor
    positions: PositionAssignment
    ref: torch.Tensor
    sink: torch.Tensor
    motion: torch.Tensor
    x_v: torch.Tensor
    x_a: torch.Tensor
    c_a: torch.Tensor
    sink_offset: int

    @property
    def batch_size(self) -> int:
        return self.x_v.shape[0]

    @property
    def spatial_tokens(self) -> int:
        return self.x_v.shape[3] * self.x_v.shape[4]

    @property
    def motion_frames(self) -> int:
        return self.motion.shape[2]

    @property
    def n_condition(self) -> int:
        return len(self.tokens.indices(*CONDITION_ROLES))

    @cached_property
    def prompted(self) -> tuple[TokenStream, torch.Tensor, PositionAssignment]:
        """Token stream, mask and positions with one prompt token in front."""
        stream = TokenStream.concat(
            [TokenStream.block(Role.TEXT, Modality.VIDEO, [0], clean=True), self.tokens]
        )
        return (
            stream,
            build_mask(stream.roles),
            assign_positions(stream, self.motion_frames, self.sink_offset),
        )


def _check_video(name: str, x: torch.Tensor) -> None:
    if x.dim() != 5:
        raise ShapeMismatchError(f"{name} must be (B, C, T, H, W), got {tuple(x.shape)}")


def pack(
    ref: torch.Tensor,
    motion: Optional[torch.Tensor],
    sink: Optional[torch.Tensor],
    x_v: torch.Tensor,
    x_a: torch.Tensor,
    c_a: torch.Tensor,
    *,
    audio_per_video: int = 4,
    sink_offset: Optional[int] = None,
) -> PackedSequence:
    """
    Pack the condition and noisy latents of one chunk.

    Args:
        ref: Reference image latents (B, C, R, H, W)
        motion: Previous-chunk latents (B, C, K, H, W) or None
        sink: First-chunk latents (B, C, S, H, W) or None
        x_v: Noisy video latents (B, C, T, H, W)
        x_a: Noisy audio latents (B, 4T, C_a)
        c_a: Audio condition from the orchestrator (B, 4T, D_c)
        audio_per_video: Audio frames per video frame
        sink_offset: Temporal index of the first sink frame; defaults to
            directly before the motion window

    Returns:
        PackedSequence ordered [ref, sink, motion, x_v, x_a]
    """
    _check_video("ref", ref)
    _check_video("x_v", x_v)
    b, c, t_v, h, w = x_v.shape
    empty = x_v.new_zeros(b, c, 0, h, w)
    motion = empty if motion is None else motion
    sink = empty if sink is None else sink
    for name, x in (("ref", ref), ("motion", motion), ("sink", sink)):
        _check_video(name, x)
        if x.shape[0] != b or x.shape[1] != c or x.shape[3:] != (h, w):
            raise ShapeMismatchError(
                f"{name} shape {tuple(x.shape)} incompatible with x_v {tuple(x_v.shape)}"
            )
    if x_a.dim() != 3 or x_a.shape[0] != b:
        raise ShapeMismatchError(f"x_a must be (B, T, C) with B={b}, got {tuple(x_a.shape)}")
    if x_a.shape[1] != audio_per_video * t_v:
        raise ShapeMismatchError(
            f"{x_a.shape[1]} audio frames for {t_v} video frames (expected {audio_per_video * t_v})"
        )
    if c_a.dim() != 3 or c_a.shape[:2] != x_a.shape[:2]:
        raise ShapeMismatchError(
            f"c_a shape {tuple(c_a.shape)} does not match x_a frames {tuple(x_a.shape[:2])}"
        )

    s = h * w
    k = motion.shape[2]
    offset = default_sink_offset(k, sink.shape[2]) if sink_offset is None else sink_offset
    tokens = TokenStream.concat(
        [
            TokenStream.block(Role.REFERENCE, Modality.VIDEO, range(ref.shape[2]), True, s),
            TokenStream.block(Role.SINK, Modality.VIDEO, range(sink.shape[2]), True, s),
            TokenStream.block(Role.MOTION, Modality.VIDEO, range(k), True, s),
            TokenStream.block(Role.NOISY_VIDEO, Modality.VIDEO, range(t_v), False, s),
            TokenStream.block(Role.NOISY_AUDIO, Modality.AUDIO, range(x_a.shape[1]), False),
        ]
    )
    return PackedSequence(
        tokens=tokens,
        mask=build_mask(tokens.roles),
        positions=assign_positions(tokens, k, offset),
        ref=ref,
        sink=sink,
        motion=motion,
        x_v=x_v,
        x_a=x_a,
        c_a=c_a,
        sink_offset=offset,
    )


@dataclass(frozen=True)
class KVCache:
    """Per-block rotated keys/values of the condition tokens of one chunk."""

    keys: tuple[torch.Tensor, ...]
    values: tuple[torch.Tensor, ...]
    hidden: torch.Tensor
    fingerprint: str
    param_versions: tuple[tuple[int, int], ...] = ()
    valid: bool = True
    n_condition: int = field(default=0)

    def invalidate(self) -> "KVCache":
        return replace(self, valid=False)


def _tensor_digest(h: "hashlib._Hash", name: str, x: torch.Tensor) -> None:
    h.update(f"{name}:{tuple(x.shape)}:{x.dtype}".encode())
    h.update(x.detach().cpu().contiguous().numpy().tobytes())


class ModalityMoE(nn.Module):
    """Two feed-forward experts, routed by modality tag (0 = video, 1 = audio)."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.experts = nn.ModuleList([FeedForward(dim, hidden), FeedForward(dim, hidden)])

    def route(self, h: torch.Tensor, modality: Modality) -> torch.Tensor:
        """Apply the expert of a single modality."""
        return self.experts[1 if modality == Modality.AUDIO else 0](h)

    def forward(self, h: torch.Tensor, audio_mask: torch.Tensor) -> torch.Tensor:
        audio_mask = audio_mask.to(h.device)
        out = torch.empty_like(h)
        video_idx = (~audio_mask).nonzero(as_tuple=True)[0]
        audio_idx = audio_mask.nonzero(as_tuple=True)[0]
        if video_idx.numel():
            out[:, video_idx] = self.experts[0](h[:, video_idx])
        if audio_idx.numel():
            out[:, audio_idx] = self.experts[1](h[:, audio_idx])
        return out


class JointBlock(nn.Module):
    """Shared-norm, shared-projection attention followed by the modality MoE."""

    def __init__(self, dim: int, n_heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.moe = ModalityMoE(dim, hidden)

    def forward(
        self,
        h: torch.Tensor,
        angles: torch.Tensor,
        mask: Optional[torch.Tensor],
        audio_mask: torch.Tensor,
        prefix: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        a, kv = self.attn(self.norm1(h), angles, mask, prefix)
        h = h + a
        return h + self.moe(self.norm2(h), audio_mask), kv


class AudioFusion(nn.Module):
    """
    Lightweight pre-denoiser audio encoder.

    Adds the projected audio condition to the noisy audio embedding and
    runs a few transformer blocks whose output projections start at zero,
    so the module is the identity map at initialization.
    """

    def __init__(self, dim: int, condition_dim: int, n_heads: int, hidden: int, n_blocks: int):
        super().__init__()
        self.c_proj = nn.Linear(condition_dim, dim, bias=False)
        self.blocks = nn.ModuleList(
            [TransformerBlock(dim, n_heads, hidden, zero_out=True) for _ in range(n_blocks)]
        )

    def forward(self, a_emb: torch.Tensor, c_a: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
        if c_a.shape[:2] != a_emb.shape[:2]:
            raise ShapeMismatchError(
                f"c_a has {c_a.shape[1]} frames but the chunk has {a_emb.shape[1]} audio frames"
            )
        h = a_emb + self.c_proj(c_a)
        for block in self.blocks:
            h = block(h, angles)
        return h


class JointDenoiser(nn.Module):
    """
    Velocity model f(x_t, t | ref, sink, motion, c_a, prompt) for both modalities.

    Args:
        cfg: Denoiser dimensions
        world: World geometry (channels, spatial size, prompt vocabulary)
        condition_dim: Width of the orchestrator's audio condition c_a
    """

    def __init__(self, cfg: DenoiserConfig, world: WorldConfig, condition_dim: int):
        super().__init__()
        self.cfg = cfg
        self.world = world
        d = cfg.model_dim
        with seeded(cfg.seed):
            self.video_in = nn.Linear(world.video_channels, d)
            self.audio_in = nn.Linear(world.audio_channels, d)
            self.spatial_embed = nn.Parameter(0.02 * torch.randn(world.spatial_tokens, d))
            self.role_embed = nn.Embedding(len(ROLE_IDS), d)
            self.prompt_embed = nn.Embedding(world.n_characters, d)
            self.time_embed = TimestepEmbedder(d)
            self.fusion = AudioFusion(
                d, condition_dim, cfg.n_heads, cfg.expert_hidden, cfg.audio_encoder_blocks
            )
            self.blocks = nn.ModuleList(
                [JointBlock(d, cfg.n_heads, cfg.expert_hidden) for _ in range(cfg.n_blocks)]
            )
            self.audio_decoder = TransformerBlock(d, cfg.n_heads, cfg.expert_hidden)
            self.audio_norm = nn.LayerNorm(d)
            self.audio_out = nn.Linear(d, world.audio_channels)
            self.video_norm = nn.LayerNorm(d)
            self.video_out = nn.Linear(d, world.video_channels)
        logger.debug(
            f"[Denoiser] {cfg.n_blocks} blocks, dim {d}, "
            f"{sum(p.numel() for p in self.parameters())} parameters"
        )

    # -- embeddings --------------------------------------------------------

    def _angles(self, positions: PositionAssignment) -> torch.Tensor:
        return positions.angles(self.cfg.head_dim, self.cfg.rope_base)

    def _time(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_embed(t)[:, None, :]

    def _video_tokens(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.world.video_channels:
            raise ShapeMismatchError(
                f"expected {self.world.video_channels} video channels, got {x.shape[1]}"
            )
        frames, s = x.shape[2], x.shape[3] * x.shape[4]
        if s != self.spatial_embed.shape[0]:
            raise ShapeMismatchError(f"expected {self.spatial_embed.shape[0]} spatial cells, got {s}")
        tokens = rearrange(x, "b c t h w -> b (t h w) c")
        return self.video_in(tokens) + self.spatial_embed.repeat(frames, 1)

    def _check_prompt(self, prompt_ids: torch.Tensor, batch: int) -> torch.Tensor:
        prompt_ids = torch.as_tensor(prompt_ids, dtype=torch.long).reshape(-1)
        if prompt_ids.shape[0] != batch:
            raise ShapeMismatchError(f"{prompt_ids.shape[0]} prompt ids for batch of {batch}")
        if prompt_ids.min() < 0 or prompt_ids.max() >= self.world.n_characters:
            raise ValueError(f"prompt ids must lie in [0, {self.world.n_characters})")
        return prompt_ids

    def _layout(
        self, seq: PackedSequence, prompt_ids: Optional[torch.Tensor]
    ) -> tuple[TokenStream, torch.Tensor, PositionAssignment]:
        if prompt_ids is None:
            return seq.tokens, seq.mask, seq.positions
        return seq.prompted

    def _embed_condition(
        self, seq: PackedSequence, prompt_ids: Optional[torch.Tensor], stream: TokenStream
    ) -> torch.Tensor:
        b = seq.batch_size
        parts = []
        if prompt_ids is not None:
            parts.append(self.prompt_embed(self._check_prompt(prompt_ids, b))[:, None, :])
        for block in (seq.ref, seq.sink, seq.motion):
            if block.shape[2]:
                parts.append(self._video_tokens(block))
        h = torch.cat(parts, dim=1)
        n = h.shape[1]
        roles = stream.role_ids()[:n].to(h.device)
        t0 = torch.zeros(b, dtype=h.dtype, device=h.device)
        return h + self.role_embed(roles)[None] + self._time(t0)

    def audio_fuse(self, c_a: torch.Tensor, x_a: torch.Tensor) -> torch.Tensor:
        """Fused audio tokens (B, T, D); the frame counts of c_a and x_a must match."""
        if c_a.shape[:2] != x_a.shape[:2]:
            raise ShapeMismatchError(
                f"c_a has {c_a.shape[1]} frames but x_a has {x_a.shape[1]}"
            )
        n = x_a.shape[1]
        audio_pos = PositionAssignment(
            torch.arange(n), torch.full((n,), 0.25, dtype=torch.float64)
        )
        return self.fusion(self.audio_in(x_a), c_a, self._angles(audio_pos))

    def _embed_noisy(self, seq: PackedSequence, t: torch.Tensor, stream: TokenStream) -> torch.Tensor:
        h = torch.cat([self._video_tokens(seq.x_v), self.audio_fuse(seq.c_a, seq.x_a)], dim=1)
        roles = stream.role_ids()[-h.shape[1]:].to(h.device)
        return h + self.role_embed(roles)[None] + self._time(t)

    def _as_time(self, t: float | torch.Tensor, batch: int, ref: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device).reshape(-1)
        if torch.any((t < 0) | (t > 1)):
            raise ValueError(f"t must lie in [0, 1], got {t.tolist()}")
        if t.shape[0] == 1:
            t = t.expand(batch)
        if t.shape[0] != batch:
            raise ShapeMismatchError(f"{t.shape[0]} timesteps for batch of {batch}")
        return t

    # -- cache -------------------------------------------------------------

    def fingerprint(self, seq: PackedSequence, prompt_ids: Optional[torch.Tensor]) -> str:
        """Content hash of the condition inputs; parameters are tracked by version."""
        h = hashlib.blake2b(digest_size=16)
        _tensor_digest(h, "ref", seq.ref)
        _tensor_digest(h, "sink", seq.sink)
        _tensor_digest(h, "motion", seq.motion)
        if prompt_ids is not None:
            _tensor_digest(h, "prompt", torch.as_tensor(prompt_ids, dtype=torch.long))
        h.update(f"offset:{seq.sink_offset}".encode())
        return h.hexdigest()

    def param_versions(self) -> tuple[tuple[int, int], ...]:
        """Storage and in-place version of every parameter; any optimizer step or load bumps it."""
        return tuple((p.data_ptr(), p._version) for p in self.parameters())

    def build_cache(self, seq: PackedSequence, prompt_ids: Optional[torch.Tensor] = None) -> KVCache:
        """Run the condition tokens alone and keep each block's keys/values."""
        stream, _, positions = self._layout(seq, prompt_ids)
        h = self._embed_condition(seq, prompt_ids, stream)
        n = h.shape[1]
        angles = self._angles(positions)[:n]
        audio_mask = stream.audio_mask()[:n]
        keys, values = [], []
        for block in self.blocks:
            h, (k, v) = block(h, angles, None, audio_mask)
            keys.append(k)
            values.append(v)
        return KVCache(
            keys=tuple(keys),
            values=tuple(values),
            hidden=h,
            fingerprint=self.fingerprint(seq, prompt_ids),
            param_versions=self.param_versions(),
            n_condition=n,
        )

    def check_cache(
        self, cache: KVCache, seq: PackedSequence, prompt_ids: Optional[torch.Tensor]
    ) -> None:
        """Raise StaleCacheError unless the cache matches the current inputs and parameters."""
        if not cache.valid:
            raise StaleCacheError("KV cache has been invalidated")
        if cache.param_versions != self.param_versions():
            raise StaleCacheError("KV cache stale: parameters changed since it was built")
        if cache.fingerprint != self.fingerprint(seq, prompt_ids):
            raise StaleCacheError("KV cache fingerprint mismatch: condition tokens changed")

    # -- forward -----------------------------------------------------------

    def attend(
        self,
        seq: PackedSequence,
        t: float | torch.Tensor,
        prompt_ids: Optional[torch.Tensor] = None,
        cache: Optional[KVCache] = None,
    ) -> torch.Tensor:
        """
        Hidden states of every token after the joint blocks (B, L, D).

        With a cache, condition keys/values and hidden states are reused and
        only the noisy tokens are recomputed.
        """
        stream, mask, positions = self._layout(seq, prompt_ids)
        t_vec = self._as_time(t, seq.batch_size, seq.x_v)
        angles = self._angles(positions)
        audio_mask = stream.audio_mask()
        h_noisy = self._embed_noisy(seq, t_vec, stream)

        if cache is None:
            h = torch.cat([self._embed_condition(seq, prompt_ids, stream), h_noisy], dim=1)
            for block in self.blocks:
                h, _ = block(h, angles, mask, audio_mask)
            return h

        self.check_cache(cache, seq, prompt_ids)
        n = cache.n_condition
        h = h_noisy
        for block, k, v in zip(self.blocks, cache.keys, cache.values, strict=True):
            h, _ = block(h, angles[n:], None, audio_mask[n:], prefix=(k, v))
        return torch.cat([cache.hidden, h], dim=1)

    def forward(
        self,
        seq: PackedSequence,
        t: float | torch.Tensor,
        prompt_ids: Optional[torch.Tensor] = None,
        cache: Optional[KVCache] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Predict the flow velocities.

        Args:
            seq: Packed chunk (see :func:`pack`)
            t: Scalar or per-sample time in [0, 1]
            prompt_ids: Character prompt ids (B,), injected as a clean context token
            cache: Condition KV cache from :meth:`build_cache`

        Returns:
            (f_v, f_a) shaped like ``seq.x_v`` and ``seq.x_a``
        """
        h = self.attend(seq, t, prompt_ids, cache)
        b, _, frames, height, width = seq.x_v.shape
        n_video = frames * height * width
        n_audio = seq.x_a.shape[1]
        h_video = h[:, h.shape[1] - n_audio - n_video : h.shape[1] - n_audio]
        h_audio = h[:, h.shape[1] - n_audio :]

        f_v = self.video_out(self.video_norm(h_video))
        f_v = rearrange(f_v, "b (t h w) c -> b c t h w", t=frames, h=height, w=width)

        audio_pos = PositionAssignment(
            torch.arange(n_audio), torch.full((n_audio,), 0.25, dtype=torch.float64)
        )
        h_audio = self.audio_decoder(h_audio, self._angles(audio_pos))
        f_a = self.audio_out(self.audio_norm(h_audio))
        return f_v, f_a
