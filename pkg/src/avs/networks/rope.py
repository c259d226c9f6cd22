"""Modality-aware rotary position encoding.

Video latents run at 6 fps and audio latents at 24 Hz. Scaling the audio
rotary frequencies by 1/4 makes the audio token at index 4k and the video
token at index k (same physical time) rotate by the same angle. Streaming
chunks keep a global timeline: new frames start at 0, motion context sits at
-K..-1 and the sink window directly before it.
"""

from dataclasses import dataclass

import torch

from avs.models.latent import Modality, Role, TokenStream

MODALITY_SCALE = {Modality.VIDEO: 1.0, Modality.AUDIO: 0.25}
DEFAULT_BASE = 10_000.0


def inv_frequencies(head_dim: int, base: float = DEFAULT_BASE, dtype=torch.float64) -> torch.Tensor:
    """base^(-2p / head_dim) for p in [0, head_dim / 2)."""
    return base ** (-torch.arange(0, head_dim, 2, dtype=dtype) / head_dim)


def angle(
    index: int,
    pair_index: int,
    modality: Modality,
    head_dim: int,
    base: float = DEFAULT_BASE,
) -> float:
    """Rotation angle of one rotary pair for a token at a temporal index."""
    if not 0 <= pair_index < head_dim // 2:
        raise ValueError(f"pair_index {pair_index} outside [0, {head_dim // 2})")
    return (index * MODALITY_SCALE[modality]) * base ** (-2 * pair_index / head_dim)


def default_sink_offset(motion_frames: int, sink_frames: int) -> int:
    """Sink window placed immediately before the motion window."""
    return -(motion_frames + sink_frames)


@dataclass(frozen=True)
class PositionAssignment:
    """Per-token temporal index and rotary frequency scale."""

    index: torch.Tensor  # (L,) long
    scale: torch.Tensor  # (L,) float64

    def __len__(self) -> int:
        return self.index.shape[0]

    def angles(self, head_dim: int, base: float = DEFAULT_BASE) -> torch.Tensor:
        """(L, head_dim / 2) rotation angles."""
        scaled = self.index.to(torch.float64) * self.scale
        return scaled[:, None] * inv_frequencies(head_dim, base)[None, :]

    @classmethod
    def sequential(cls, length: int) -> "PositionAssignment":
        """Plain 0..L-1 positions (orchestrator sequence order)."""
        return cls(torch.arange(length), torch.ones(length, dtype=torch.float64))


def assign_positions(
    tokens: TokenStream,
    motion_frames: int,
    sink_offset: int,
) -> PositionAssignment:
    """
    Place every token of a packed chunk on the global timeline.

    ``tokens.frames`` holds the local frame index inside each block. Noisy
    tokens keep it (0..T-1), motion frames map to -K..-1, sink frames to
    ``sink_offset`` onward; reference and text tokens are atemporal (index
    0, told apart by their role embedding). Audio tokens live on the 4x
    denser audio timeline with frequency scale 1/4.

    Raises:
        ValueError: if the sink window overlaps the motion window
    """
    sink_video = {f for r, m, f in zip(tokens.roles, tokens.modalities, tokens.frames, strict=True)
                  if r == Role.SINK and m == Modality.VIDEO}
    if sink_video:
        sink_lo = sink_offset + min(sink_video)
        sink_hi = sink_offset + max(sink_video)
        if motion_frames > 0 and sink_hi >= -motion_frames and sink_lo <= -1:
            raise ValueError(
                f"sink window [{sink_lo}, {sink_hi}] overlaps motion window "
                f"[{-motion_frames}, -1]"
            )

    index = []
    scale = []
    for role, modality, frame in zip(tokens.roles, tokens.modalities, tokens.frames, strict=True):
        density = 1 if modality == Modality.VIDEO else 4
        if role == Role.MOTION:
            pos = frame - motion_frames * density
        elif role == Role.SINK:
            pos = sink_offset * density + frame
        elif role in (Role.REFERENCE, Role.TEXT):
            pos = 0
        else:
            pos = frame
        index.append(pos)
        scale.append(MODALITY_SCALE[modality])
    return PositionAssignment(
        torch.tensor(index, dtype=torch.long), torch.tensor(scale, dtype=torch.float64)
    )


def apply_rotary(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """
    Rotate consecutive channel pairs of ``x`` (..., L, head_dim) by
    ``angles`` (L, head_dim / 2).
    """
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    rot_even = x_even * cos - x_odd * sin
    rot_odd = x_even * sin + x_odd * cos
    return torch.stack([rot_even, rot_odd], dim=-1).flatten(-2)
