"""Latent blocks and token streams shared by every module."""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import torch

from avs.core.errors import ShapeMismatchError


class Modality(str, Enum):
    """Latent modality."""

    VIDEO = "video"
    AUDIO = "audio"


class Role(str, Enum):
    """Role of a token inside a packed sequence."""

    REFERENCE = "reference"
    MOTION = "motion"
    SINK = "sink"
    NOISY_VIDEO = "noisy_video"
    NOISY_AUDIO = "noisy_audio"
    TEXT = "text"
    HISTORY = "history"
    COND_TAIL = "cond_tail"


# Clean, timestep-invariant guidance inside the denoiser sequence.
CONDITION_ROLES = frozenset({Role.REFERENCE, Role.MOTION, Role.SINK, Role.TEXT})
NOISY_ROLES = frozenset({Role.NOISY_VIDEO, Role.NOISY_AUDIO})

# Stable integer ids for role embeddings.
ROLE_IDS = {role: i for i, role in enumerate(Role)}


class Provenance(str, Enum):
    """Where the content of a latent block came from."""

    GROUND_TRUTH = "ground_truth"
    GENERATED = "generated"
    NOISE = "noise"


@dataclass(frozen=True)
class LatentBlock:
    """
    Modality-tagged latent array.

    Video data is ``(channels, frames, height, width)``; audio data is
    ``(frames, channels)``.
    """

    modality: Modality
    data: torch.Tensor
    provenance: Provenance = Provenance.GROUND_TRUTH

    def __post_init__(self) -> None:
        expected = 4 if self.modality == Modality.VIDEO else 2
        if self.data.dim() != expected:
            raise ShapeMismatchError(
                f"{self.modality.value} block must be {expected}-D, got shape "
                f"{tuple(self.data.shape)}"
            )

    @property
    def frames(self) -> int:
        """Number of latent frames."""
        return self.data.shape[1] if self.modality == Modality.VIDEO else self.data.shape[0]

    @property
    def channels(self) -> int:
        """Number of latent channels."""
        return self.data.shape[0] if self.modality == Modality.VIDEO else self.data.shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def slice_frames(self, start: int, stop: int) -> "LatentBlock":
        """Frames ``[start, stop)`` as a new block with the same provenance."""
        if self.modality == Modality.VIDEO:
            return replace(self, data=self.data[:, start:stop])
        return replace(self, data=self.data[start:stop])

    def tail(self, n: int) -> "LatentBlock":
        """Last ``n`` frames (empty block when n == 0)."""
        return self.slice_frames(max(self.frames - n, 0), self.frames)

    def with_data(self, data: torch.Tensor, provenance: Provenance | None = None) -> "LatentBlock":
        """Same modality, new content."""
        return LatentBlock(self.modality, data, provenance or self.provenance)

    def detach(self) -> "LatentBlock":
        return replace(self, data=self.data.detach())

    @classmethod
    def concat(cls, blocks: Sequence["LatentBlock"]) -> "LatentBlock":
        """Concatenate blocks of one modality along time."""
        if not blocks:
            raise ValueError("cannot concatenate an empty block list")
        modality = blocks[0].modality
        if any(b.modality != modality for b in blocks):
            raise ShapeMismatchError("cannot concatenate blocks of different modalities")
        dim = 1 if modality == Modality.VIDEO else 0
        provenances = {b.provenance for b in blocks}
        provenance = provenances.pop() if len(provenances) == 1 else Provenance.GENERATED
        return cls(modality, torch.cat([b.data for b in blocks], dim=dim), provenance)

    @classmethod
    def empty_like(cls, block: "LatentBlock") -> "LatentBlock":
        return block.slice_frames(0, 0)


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "tensors") -> None:
    """Raise ShapeMismatchError unless two tensors have the same shape."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


@dataclass(frozen=True)
class TokenStream:
    """
    Flat token metadata for a packed sequence.

    Every token carries one role, one modality, a temporal index (negative
    for context placed before the current chunk) and a clean-state flag.
    """

    roles: tuple[Role, ...] = ()
    modalities: tuple[Modality, ...] = ()
    frames: tuple[int, ...] = ()
    clean: tuple[bool, ...] = ()
    spatial: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        n = len(self.roles)
        if not (len(self.modalities) == len(self.frames) == len(self.clean) == n):
            raise ShapeMismatchError("token stream fields have different lengths")
        if self.spatial and len(self.spatial) != n:
            raise ShapeMismatchError("token stream spatial index has wrong length")

    def __len__(self) -> int:
        return len(self.roles)

    @classmethod
    def block(
        cls,
        role: Role,
        modality: Modality,
        frames: Iterable[int],
        clean: bool,
        spatial_tokens: int = 1,
    ) -> "TokenStream":
        """Tokens for ``frames`` latent frames, each split into spatial cells."""
        frame_list = list(frames)
        n = len(frame_list) * spatial_tokens
        return cls(
            roles=(role,) * n,
            modalities=(modality,) * n,
            frames=tuple(f for f in frame_list for _ in range(spatial_tokens)),
            clean=(clean,) * n,
            spatial=tuple(s for _ in frame_list for s in range(spatial_tokens)),
        )

    @classmethod
    def concat(cls, streams: Sequence["TokenStream"]) -> "TokenStream":
        """Concatenate streams in order."""
        spatial: tuple[int, ...] = ()
        for s in streams:
            spatial += s.spatial if s.spatial else (0,) * len(s)
        return cls(
            roles=sum((s.roles for s in streams), ()),
            modalities=sum((s.modalities for s in streams), ()),
            frames=sum((s.frames for s in streams), ()),
            clean=sum((s.clean for s in streams), ()),
            spatial=spatial,
        )

    def indices(self, *roles: Role) -> list[int]:
        """Token positions whose role is in ``roles``."""
        wanted = set(roles)
        return [i for i, r in enumerate(self.roles) if r in wanted]

    def count(self, role: Role) -> int:
        return sum(1 for r in self.roles if r == role)

    def role_ids(self) -> torch.Tensor:
        return torch.tensor([ROLE_IDS[r] for r in self.roles], dtype=torch.long)

    def condition_mask(self) -> torch.Tensor:
        """Boolean vector, True for condition tokens."""
        return torch.tensor([r in CONDITION_ROLES for r in self.roles], dtype=torch.bool)

    def audio_mask(self) -> torch.Tensor:
        """Boolean vector, True for audio-modality tokens."""
        return torch.tensor([m == Modality.AUDIO for m in self.modalities], dtype=torch.bool)
