"""State carried from chunk to chunk during rollouts and streaming."""

from dataclasses import dataclass, field
from typing import Optional

from loguru import logger

from avs.models.latent import LatentBlock, Provenance
from avs.models.world import HistoryBuffer


@dataclass
class RolloutState:
    """
    Per-stream autoregressive state.

    ``sink`` is set by the first chunk and never replaced; ``motion`` holds
    the previous chunk's video latents exactly as generated (no codec round
    trip); ``cursor`` is the real-valued transcript position reached so far.
    """

    history: HistoryBuffer
    sink: Optional[LatentBlock] = None
    motion: Optional[LatentBlock] = None
    cursor: float = 0.0
    chunk_index: int = 0
    cursor_regressions: int = 0
    provenance_log: list[Provenance] = field(default_factory=list)

    def advance_cursor(self, proposed: float, n_tokens: int) -> float:
        """Clamp a pointer estimate to [cursor, N] and store it."""
        if proposed < self.cursor:
            self.cursor_regressions += 1
            logger.warning(
                f"[Pointer] chunk {self.chunk_index}: endpoint {proposed:.3f} behind cursor "
                f"{self.cursor:.3f}, clamped"
            )
        self.cursor = min(max(self.cursor, proposed), float(n_tokens))
        return self.cursor

    def set_sink(self, block: LatentBlock) -> None:
        if self.sink is not None:
            raise RuntimeError("sink is immutable once set")
        self.sink = block

    def finished(self, n_tokens: int) -> bool:
        return self.cursor >= n_tokens
