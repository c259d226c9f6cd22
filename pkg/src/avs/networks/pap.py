"""Progress-aware pointer: where in the transcript a chunk stops speaking."""

import math
from dataclasses import dataclass
from typing import Sequence, TypeVar

import torch
import torch.nn.functional as F
from torch import nn

from avs.core.config import PointerConfig
from avs.core.errors import ShapeMismatchError
from avs.networks.layers import seeded

T = TypeVar("T")


@dataclass(frozen=True)
class PointerOutput:
    """Endpoint estimate with its per-frame ingredients."""

    s_hat: torch.Tensor  # scalar, in [0, N]
    p: torch.Tensor  # (J,) soft positions
    delta: torch.Tensor  # (J,) learned offsets
    w: torch.Tensor  # (J,) confidence weights, sum to 1
    n_tokens: int


def expected_position(logits: torch.Tensor) -> torch.Tensor:
    """p_j = sum_i softmax(logits_j)_i * i for logits (J, N)."""
    if logits.shape[-1] == 0:
        raise ValueError("cannot point into an empty transcript")
    alpha = torch.softmax(logits, dim=-1)
    index = torch.arange(logits.shape[-1], dtype=logits.dtype, device=logits.device)
    return alpha @ index


def endpoint(p: torch.Tensor, delta: torch.Tensor, w: torch.Tensor, n_tokens: int) -> torch.Tensor:
    """s_hat = clamp(sum_j w_j (p_j + delta_j), 0, N)."""
    if not (p.shape == delta.shape == w.shape):
        raise ShapeMismatchError(
            f"p/delta/w shapes differ: {tuple(p.shape)}, {tuple(delta.shape)}, {tuple(w.shape)}"
        )
    return torch.clamp((w * (p + delta)).sum(), 0.0, float(n_tokens))


def pap_loss(s_hat: torch.Tensor, s_true: float | torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Smooth l1: 0.5 d^2 / beta for |d| < beta, else |d| - 0.5 beta."""
    target = torch.as_tensor(s_true, dtype=s_hat.dtype, device=s_hat.device)
    return F.smooth_l1_loss(s_hat, target, beta=beta)


def truncate_transcript(transcript: Sequence[T], s_hat: float) -> list[T]:
    """First ceil(s_hat) tokens; the token being spoken is kept."""
    n = math.ceil(float(s_hat) - 1e-9)
    return list(transcript[: max(0, min(n, len(transcript)))])


class ProgressPointer(nn.Module):
    """
    Cross-attention from audio-condition frames to transcript states.

    Each frame yields a soft position, refined by an offset head; frames are
    pooled with softmax confidence weights.
    """

    def __init__(self, cfg: PointerConfig, condition_dim: int):
        super().__init__()
        self.cfg = cfg
        with seeded(cfg.seed):
            self.query = nn.Linear(condition_dim, cfg.key_dim)
            self.key = nn.Linear(condition_dim, cfg.key_dim)
            self.offset = nn.Sequential(
                nn.Linear(condition_dim, cfg.offset_hidden),
                nn.GELU(),
                nn.Linear(cfg.offset_hidden, 1),
            )
            self.score = nn.Linear(condition_dim, 1)

    def soft_positions(self, text_states: torch.Tensor, c_a: torch.Tensor) -> torch.Tensor:
        """(J,) expected transcript index attended by each audio frame."""
        if text_states.shape[0] == 0:
            raise ValueError("cannot point into an empty transcript")
        logits = self.query(c_a) @ self.key(text_states).T / math.sqrt(self.cfg.key_dim)
        return expected_position(logits)

    def forward(self, text_states: torch.Tensor, c_a: torch.Tensor) -> PointerOutput:
        n = text_states.shape[0]
        p = self.soft_positions(text_states, c_a)
        delta = self.offset(c_a).squeeze(-1)
        w = torch.softmax(self.score(c_a).squeeze(-1), dim=0)
        return PointerOutput(s_hat=endpoint(p, delta, w, n), p=p, delta=delta, w=w, n_tokens=n)

    def loss(self, out: PointerOutput, s_true: float) -> torch.Tensor:
        return pap_loss(out.s_hat, s_true, self.cfg.beta)
