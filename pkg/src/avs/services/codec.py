"""Fixed toy codecs standing in for the audio/video VAEs."""

import torch
from loguru import logger

from avs.core.config import VIDEO_VAE_TEMPORAL_STRIDE, WorldConfig
from avs.core.errors import ShapeMismatchError
from avs.models.latent import LatentBlock, Modality, Provenance
from avs.services.synthworld import hashed_seed


def pixel_frames(latent_frames: int, stride: int = VIDEO_VAE_TEMPORAL_STRIDE) -> int:
    """Decoded frame count: the first latent frame decodes alone, the rest ``stride`` each."""
    if latent_frames <= 0:
        return 0
    return 1 + (latent_frames - 1) * stride


def _orthogonal(n: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed % (2**63))
    q, r = torch.linalg.qr(torch.randn(n, n, generator=gen, dtype=torch.float64))
    # Sign fix makes the factorisation unique.
    return q * torch.sign(torch.diagonal(r))[None, :]


class ToyCodec:
    """
    Seeded orthogonal linear codec.

    ``decode`` mixes channels with an orthogonal matrix and, for video,
    unfolds each latent frame after the first into ``stride`` pixel frames
    (9 latents -> 33 frames). ``encode`` is the exact inverse. Encode calls
    are counted so streaming can prove it never re-encodes its own output.
    """

    def __init__(self, cfg: WorldConfig, stride: int = VIDEO_VAE_TEMPORAL_STRIDE):
        self.cfg = cfg
        self.stride = stride
        self._video_mix = _orthogonal(cfg.video_channels, hashed_seed("codec-video", cfg.seed))
        self._audio_mix = _orthogonal(cfg.audio_channels, hashed_seed("codec-audio", cfg.seed))
        self.encode_calls = 0
        self.decode_calls = 0

    def _mix(self, modality: Modality) -> torch.Tensor:
        return self._video_mix if modality == Modality.VIDEO else self._audio_mix

    def decode(self, block: LatentBlock) -> torch.Tensor:
        """Latents -> toy pixel/sample space."""
        self.decode_calls += 1
        mix = self._mix(block.modality).to(block.data.dtype)
        if block.channels != mix.shape[0]:
            raise ShapeMismatchError(
                f"{block.modality.value} codec expects {mix.shape[0]} channels, got {block.channels}"
            )
        if block.modality == Modality.AUDIO:
            return block.data @ mix.T
        x = torch.einsum("oc,cthw->othw", mix, block.data)
        if block.frames == 0:
            return x
        head, rest = x[:, :1], x[:, 1:]
        return torch.cat([head, rest.repeat_interleave(self.stride, dim=1)], dim=1)

    def encode(self, pixels: torch.Tensor, modality: Modality) -> LatentBlock:
        """Toy pixel/sample space -> latents."""
        self.encode_calls += 1
        mix = self._mix(modality).to(pixels.dtype)
        if modality == Modality.AUDIO:
            if pixels.dim() != 2 or pixels.shape[1] != mix.shape[0]:
                raise ShapeMismatchError(f"bad audio shape {tuple(pixels.shape)}")
            return LatentBlock(modality, pixels @ mix, Provenance.GROUND_TRUTH)
        if pixels.dim() != 4 or pixels.shape[0] != mix.shape[0]:
            raise ShapeMismatchError(f"bad video shape {tuple(pixels.shape)}")
        n = pixels.shape[1]
        if n == 0:
            frames = pixels
        else:
            if (n - 1) % self.stride:
                raise ShapeMismatchError(
                    f"{n} pixel frames is not 1 + k x {self.stride}"
                )
            head = pixels[:, :1]
            rest = pixels[:, 1:]
            c, _, h, w = pixels.shape
            rest = rest.reshape(c, (n - 1) // self.stride, self.stride, h, w).mean(dim=2)
            frames = torch.cat([head, rest], dim=1)
        latents = torch.einsum("oc,othw->cthw", mix, frames)
        return LatentBlock(modality, latents, Provenance.GROUND_TRUTH)


def toy_codec_roundtrip(block: LatentBlock, codec: ToyCodec) -> LatentBlock:
    """decode then encode; reproduces the block within codec tolerance."""
    pixels = codec.decode(block)
    out = codec.encode(pixels, block.modality)
    logger.debug(
        f"[Codec] {block.modality.value} {block.frames} latent frames -> "
        f"{pixels.shape[1] if block.modality == Modality.VIDEO else pixels.shape[0]} decoded"
    )
    return out.with_data(out.data, block.provenance)
