"""SCW1 synthetic-world sample files.

Layout: b"SCW1" | u32 version | str world-config YAML | u32 n_samples |
n x (u32 prompt_id | ints tokens | ints durations | video | audio | identity)
"""

from pathlib import Path

import yaml
from loguru import logger

from avs.core.config import WorldConfig
from avs.core.errors import ContainerError
from avs.models.latent import LatentBlock, Modality
from avs.models.world import SynthSample
from avs.parsers.binary import BinaryReader, BinaryWriter

MAGIC = b"SCW1"
VERSION = 1


def encode_samples(cfg: WorldConfig, samples: list[SynthSample]) -> bytes:
    w = BinaryWriter().raw(MAGIC).u32(VERSION)
    w.text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))
    w.u32(len(samples))
    for s in samples:
        w.u32(s.prompt_id).ints(s.tokens).ints(s.durations)
        w.array(s.video.data).array(s.audio.data).array(s.identity)
    return w.getvalue()


def decode_samples(data: bytes, source: str = "<bytes>") -> tuple[WorldConfig, list[SynthSample]]:
    r = BinaryReader(data, source)
    r.magic(MAGIC)
    version = r.u32()
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported sample file version {version}")
    try:
        cfg = WorldConfig.model_validate(yaml.safe_load(r.text()))
    except (ValueError, yaml.YAMLError) as e:
        raise ContainerError(f"{source}: embedded world config is invalid: {e}") from e
    samples = []
    for _ in range(r.u32()):
        prompt_id = r.u32()
        tokens = tuple(r.ints())
        durations = tuple(r.ints())
        video, audio, identity = r.array(), r.array(), r.array()
        try:
            samples.append(
                SynthSample(
                    tokens=tokens,
                    durations=durations,
                    audio=LatentBlock(Modality.AUDIO, audio),
                    video=LatentBlock(Modality.VIDEO, video),
                    identity=identity,
                    prompt_id=prompt_id,
                )
            )
        except ValueError as e:
            raise ContainerError(f"{source}: inconsistent sample: {e}") from e
    return cfg, samples


def write_samples(path: Path, cfg: WorldConfig, samples: list[SynthSample]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_samples(cfg, samples))
    logger.info(f"[World] wrote {len(samples)} samples to {path}")
    return path


def read_samples(path: Path) -> tuple[WorldConfig, list[SynthSample]]:
    if not path.exists():
        raise ContainerError(f"sample file not found: {path}")
    return decode_samples(path.read_bytes(), str(path))
