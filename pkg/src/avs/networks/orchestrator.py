"""Causal orchestrator producing the frame-aligned audio condition c_a.

The packed sequence is, in this order and only this order:

    e_ref  - reference audio frames (one token per latent frame)
    E_txt  - prompt token followed by the visible transcript window
    e_hist - recent audio history (at most ``history_cap_s`` seconds)
    E_cond - noisy audio frames of the current chunk plus a timestep embedding

Hidden states at the E_cond positions form c_a; hidden states at the
transcript positions feed the progress-aware pointer.
"""

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from avs.core.config import OrchestratorConfig, WorldConfig
from avs.core.errors import ShapeMismatchError
from avs.models.latent import Modality, Role, TokenStream
from avs.models.world import HistoryBuffer
from avs.networks.layers import TimestepEmbedder, TransformerBlock, causal_mask, seeded
from avs.networks.rope import PositionAssignment

SEGMENTS = (Role.REFERENCE, Role.TEXT, Role.HISTORY, Role.COND_TAIL)
SEGMENT_IDS = {role: i for i, role in enumerate(SEGMENTS)}


@dataclass(frozen=True)
class OrchestratorInput:
    """
    Unbatched orchestrator input for one chunk.

    Audio tensors are ``(frames, channels)``; ``transcript`` holds the
    visible window of token ids.
    """

    ref_audio: torch.Tensor
    transcript: torch.Tensor
    history_audio: torch.Tensor
    x_t_a: torch.Tensor
    t: float
    prompt_id: Optional[int] = None


@dataclass(frozen=True)
class PackedOrchestratorSequence:
    tokens: TokenStream
    embeddings: torch.Tensor  # (L, D)

    def span(self, role: Role) -> slice:
        idx = self.tokens.indices(role)
        if not idx:
            return slice(0, 0)
        return slice(idx[0], idx[-1] + 1)


@dataclass(frozen=True)
class AudioCondition:
    """c_a (frames, D) plus the transcript-window states A (N, D)."""

    c_a: torch.Tensor
    text_states: torch.Tensor

    @property
    def frames(self) -> int:
        return self.c_a.shape[0]


def truncate_history(
    history: HistoryBuffer, cap_seconds: float = 15.0, audio_rate: float = 24.0
) -> HistoryBuffer:
    """
    Drop the oldest whole tokens (with their audio) until the history fits the cap.

    Raises:
        ShapeMismatchError: if the history's durations do not match its audio
    """
    history.validate()
    cap_frames = int(cap_seconds * audio_rate)
    total = history.frames
    drop = 0
    while total > cap_frames and drop < len(history.durations):
        total -= history.durations[drop]
        drop += 1
    if drop == 0:
        return history
    cut = history.frames - total
    return HistoryBuffer(
        audio=history.audio[cut:],
        token_index=history.token_index[drop:],
        durations=history.durations[drop:],
    )


class Orchestrator(nn.Module):
    """
    Small causal transformer standing in for the language model.

    Args:
        cfg: Orchestrator dimensions
        world: World vocabulary and audio channels
        history_cap_frames: Maximum e_hist length accepted by :meth:`pack_sequence`
    """

    def __init__(self, cfg: OrchestratorConfig, world: WorldConfig, history_cap_frames: int):
        super().__init__()
        self.cfg = cfg
        self.world = world
        self.history_cap_frames = history_cap_frames
        d = cfg.model_dim
        with seeded(cfg.seed):
            self.audio_proj = nn.Linear(world.audio_channels, d)
            self.cond_proj = nn.Linear(world.audio_channels, d)
            # transcript ids first, then one prompt id per character
            self.text_embed = nn.Embedding(world.vocab_size + world.n_characters, d)
            self.segment_embed = nn.Embedding(len(SEGMENTS), d)
            self.time_embed = TimestepEmbedder(d)
            self.blocks = nn.ModuleList(
                [TransformerBlock(d, cfg.n_heads, cfg.ffn_hidden) for _ in range(cfg.n_blocks)]
            )
            self.norm = nn.LayerNorm(d)

    @property
    def dim(self) -> int:
        return self.cfg.model_dim

    def _check(self, inp: OrchestratorInput) -> None:
        channels = self.world.audio_channels
        for name, x in (("ref_audio", inp.ref_audio), ("history_audio", inp.history_audio),
                        ("x_t_a", inp.x_t_a)):
            if x.dim() != 2 or x.shape[1] != channels:
                raise ShapeMismatchError(f"{name} must be (frames, {channels}), got {tuple(x.shape)}")
        if inp.transcript.dim() != 1:
            raise ShapeMismatchError("transcript must be a 1-D tensor of token ids")
        if inp.history_audio.shape[0] > self.history_cap_frames:
            raise ValueError(
                f"history has {inp.history_audio.shape[0]} frames, over the cap of "
                f"{self.history_cap_frames}; truncate it first"
            )
        if not 0.0 <= float(inp.t) <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {inp.t}")

    def pack_sequence(self, inp: OrchestratorInput) -> PackedOrchestratorSequence:
        """Embed and concatenate [e_ref, E_txt, e_hist, E_cond(t)]."""
        self._check(inp)
        n_ref = inp.ref_audio.shape[0]
        n_hist = inp.history_audio.shape[0]
        n_cond = inp.x_t_a.shape[0]
        text_ids = inp.transcript.to(torch.long)
        if inp.prompt_id is not None:
            prompt = torch.tensor([self.world.vocab_size + inp.prompt_id], dtype=torch.long)
            text_ids = torch.cat([prompt, text_ids])
        n_text = text_ids.shape[0]

        tokens = TokenStream.concat(
            [
                TokenStream.block(Role.REFERENCE, Modality.AUDIO, range(n_ref), True),
                TokenStream.block(Role.TEXT, Modality.AUDIO, range(n_text), True),
                TokenStream.block(Role.HISTORY, Modality.AUDIO, range(n_hist), True),
                TokenStream.block(Role.COND_TAIL, Modality.AUDIO, range(n_cond), False),
            ]
        )
        device = inp.x_t_a.device
        t = torch.tensor([float(inp.t)], dtype=inp.x_t_a.dtype, device=device)
        parts = [
            self.audio_proj(inp.ref_audio),
            self.text_embed(text_ids.to(device)),
            self.audio_proj(inp.history_audio),
            self.cond_proj(inp.x_t_a) + self.time_embed(t),
        ]
        segments = torch.tensor(
            [SEGMENT_IDS[r] for r in tokens.roles], dtype=torch.long, device=device
        )
        h = torch.cat(parts, dim=0) + self.segment_embed(segments)
        return PackedOrchestratorSequence(tokens=tokens, embeddings=h)

    def hidden_states(self, inp: OrchestratorInput) -> tuple[PackedOrchestratorSequence, torch.Tensor]:
        """Final-layer hidden states (L, D) of the packed sequence."""
        seq = self.pack_sequence(inp)
        n = len(seq.tokens)
        angles = PositionAssignment.sequential(n).angles(self.dim // self.cfg.n_heads, self.cfg.rope_base)
        mask = causal_mask(n)
        h = seq.embeddings[None]
        for block in self.blocks:
            h = block(h, angles, mask)
        return seq, self.norm(h[0])

    def condition(self, inp: OrchestratorInput) -> AudioCondition:
        """c_a at the cond-tail positions and the transcript states A."""
        seq, h = self.hidden_states(inp)
        text = seq.span(Role.TEXT)
        offset = 1 if inp.prompt_id is not None else 0
        text_states = h[text.start + offset : text.stop]
        c_a = h[seq.span(Role.COND_TAIL)]
        if c_a.shape[0] != inp.x_t_a.shape[0]:
            raise ShapeMismatchError(f"c_a has {c_a.shape[0]} frames, expected {inp.x_t_a.shape[0]}")
        return AudioCondition(c_a=c_a, text_states=text_states)
