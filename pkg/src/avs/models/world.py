"""Synthetic world records and the aligned history buffer."""

import math
from dataclasses import dataclass, field

import torch

from avs.core.errors import ShapeMismatchError
from avs.models.latent import LatentBlock, Modality


@dataclass(frozen=True)
class SynthSample:
    """One synthetic utterance: transcript, alignment and coupled latents."""

    tokens: tuple[int, ...]
    durations: tuple[int, ...]
    audio: LatentBlock
    video: LatentBlock
    identity: torch.Tensor
    prompt_id: int = 0

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.durations):
            raise ShapeMismatchError("tokens and durations differ in length")
        if self.audio.modality != Modality.AUDIO or self.video.modality != Modality.VIDEO:
            raise ShapeMismatchError("sample blocks have the wrong modalities")
        if sum(self.durations) != self.audio.frames:
            raise ShapeMismatchError(
                f"durations sum to {sum(self.durations)} but audio has {self.audio.frames} frames"
            )
        if self.video.frames * 4 != self.audio.frames:
            raise ShapeMismatchError(
                f"video frames x 4 ({self.video.frames * 4}) != audio frames ({self.audio.frames})"
            )

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


@dataclass
class HistoryBuffer:
    """
    Audio history aligned with the transcript tokens it speaks.

    ``token_index`` holds global transcript positions, ``durations`` the
    audio frames attributed to each of them. ``sum(durations)`` always
    equals the number of audio frames.
    """

    audio: torch.Tensor
    token_index: list[int] = field(default_factory=list)
    durations: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if len(self.token_index) != len(self.durations):
            raise ShapeMismatchError("history token_index and durations differ in length")
        if sum(self.durations) != self.audio.shape[0]:
            raise ShapeMismatchError(
                f"misaligned history: durations sum to {sum(self.durations)} "
                f"but audio has {self.audio.shape[0]} frames"
            )

    @classmethod
    def empty(cls, channels: int, dtype: torch.dtype = torch.float32) -> "HistoryBuffer":
        return cls(audio=torch.zeros(0, channels, dtype=dtype))

    @classmethod
    def from_alignment(
        cls, audio: torch.Tensor, durations: tuple[int, ...] | list[int], frames: int
    ) -> "HistoryBuffer":
        """Ground-truth history covering audio frames ``[0, frames)``."""
        index: list[int] = []
        spans: list[int] = []
        start = 0
        for i, d in enumerate(durations):
            if start >= frames:
                break
            spans.append(min(d, frames - start))
            index.append(i)
            start += d
        return cls(audio=audio[:frames], token_index=index, durations=spans)

    @property
    def frames(self) -> int:
        return self.audio.shape[0]

    def transcript(self, tokens: tuple[int, ...] | list[int]) -> list[int]:
        """Token ids of the buffered history."""
        return [tokens[i] for i in self.token_index]

    def append_chunk(
        self,
        audio: torch.Tensor,
        cursor_from: float,
        cursor_to: float,
        n_tokens: int,
    ) -> None:
        """
        Append a chunk of audio spoken while the cursor moved from
        ``cursor_from`` to ``cursor_to``.

        Frames are attributed to transcript positions in proportion to the
        cursor progress inside each position; a position continuing from the
        previous chunk is merged with the buffered entry.
        """
        n_frames = audio.shape[0]
        if n_frames == 0:
            return
        last = max(n_tokens - 1, 0)
        if cursor_to <= cursor_from:
            shares = {min(int(math.floor(cursor_from)), last): float(n_frames)}
        else:
            shares = {}
            span = cursor_to - cursor_from
            k = int(math.floor(cursor_from))
            while k < cursor_to and k <= last:
                lo, hi = max(cursor_from, k), min(cursor_to, k + 1)
                if hi > lo:
                    shares[k] = n_frames * (hi - lo) / span
                k += 1
            if not shares:
                shares = {last: float(n_frames)}

        # Cumulative rounding keeps the integer counts summing to n_frames.
        counts: list[tuple[int, int]] = []
        acc, assigned = 0.0, 0
        for k, share in sorted(shares.items()):
            acc += share
            upto = int(round(acc))
            counts.append((k, upto - assigned))
            assigned = upto
        if assigned != n_frames:
            k, c = counts[-1]
            counts[-1] = (k, c + n_frames - assigned)

        for k, c in counts:
            if c <= 0:
                continue
            if self.token_index and self.token_index[-1] == k:
                self.durations[-1] += c
            else:
                self.token_index.append(k)
                self.durations.append(c)
        self.audio = torch.cat([self.audio, audio.to(self.audio.dtype)], dim=0)
        self.validate()
