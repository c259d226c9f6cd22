"""Transformer building blocks shared by the denoiser and the orchestrator."""

import math
from contextlib import contextmanager
from typing import Iterator, Optional

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from avs.networks.rope import apply_rotary


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Deterministic parameter init without touching the global RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal embedding of t in [0, 1] (scaled to [0, 1000])."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = (t * 1000.0)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    """Sinusoidal features followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.dim))


class FeedForward(nn.Module):
    """Linear - GELU - Linear."""

    def __init__(self, dim: int, hidden: int, zero_out: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        if zero_out:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(nn.Module):
    """
    Multi-head softmax attention with rotary positions and a boolean
    permission mask (True = may attend).

    An optional ``prefix`` of already-rotated keys/values is prepended to
    the keys of this call; queries never include the prefix.
    """

    def __init__(self, dim: int, n_heads: int, zero_out: bool = False):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def project_kv(
        self, x: torch.Tensor, angles: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Rotated queries, rotated keys and values, each (B, H, L, head_dim)."""
        q, k, v = rearrange(self.qkv(x), "b l (three h d) -> three b h l d", three=3, h=self.n_heads)
        return apply_rotary(q, angles), apply_rotary(k, angles), v

    def forward(
        self,
        x: torch.Tensor,
        angles: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
        prefix: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        """
        Args:
            x: (B, L, dim) token states
            angles: (L, head_dim / 2) rotary angles of the query tokens
            mask: (L, L_prefix + L) permission matrix, None = attend everywhere
            prefix: cached (keys, values) to prepend

        Returns:
            (output, (keys, values)) where keys/values cover only this call's tokens
        """
        q, k, v = self.project_kv(x, angles)
        keys, values = k, v
        if prefix is not None:
            keys = torch.cat([prefix[0], k], dim=2)
            values = torch.cat([prefix[1], v], dim=2)
        logits = torch.einsum("bhqd,bhkd->bhqk", q, keys) / math.sqrt(self.head_dim)
        if mask is not None:
            logits = logits.masked_fill(~mask.to(logits.device), float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = torch.einsum("bhqk,bhkd->bhqd", weights, values)
        return self.out(rearrange(out, "b h l d -> b l (h d)")), (k, v)


class TransformerBlock(nn.Module):
    """Pre-norm attention + dense feed-forward block."""

    def __init__(self, dim: int, n_heads: int, hidden: int, zero_out: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads, zero_out=zero_out)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, zero_out=zero_out)

    def forward(
        self, x: torch.Tensor, angles: torch.Tensor, mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        a, _ = self.attn(self.norm1(x), angles, mask)
        x = x + a
        return x + self.ffn(self.norm2(x))


def causal_mask(length: int) -> torch.Tensor:
    """Lower-triangular permission matrix."""
    return torch.tril(torch.ones(length, length, dtype=torch.bool))
