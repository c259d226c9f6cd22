"""SCK1 parameter checkpoints.

Layout (little-endian):

    b"SCK1" | u32 version | str tag | str config YAML |
    u32 n_tensors | n x (str name | u32 ndim | u32 dims... | f32 data)

Strings are u32 byte length + UTF-8. Tensor names are namespaced
(``denoiser.*``, ``orchestrator.*``, ``pap.*``, ``fake_score.*``).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from loguru import logger
from torch import nn

from avs.core.config import RunConfig
from avs.core.errors import CheckpointError, ContainerError
from avs.core.logger import log_checkpoint
from avs.parsers.binary import BinaryReader, BinaryWriter

MAGIC = b"SCK1"
VERSION = 1
TAGS = ("teacher", "student_stage1", "student_stage2")


@dataclass
class Checkpoint:
    """Decoded checkpoint."""

    tag: str
    config: RunConfig
    tensors: dict[str, torch.Tensor]

    def namespace(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        head = f"{prefix}."
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}

    def has(self, prefix: str) -> bool:
        return any(k.startswith(f"{prefix}.") for k in self.tensors)

    def load_into(self, module: nn.Module, prefix: str) -> None:
        """Copy a namespace into a module (dtype of the module is kept)."""
        state = self.namespace(prefix)
        if not state:
            raise CheckpointError(f"checkpoint [{self.tag}] has no '{prefix}' parameters")
        own = module.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                f"'{prefix}' parameters do not match the model: missing={missing[:5]}, "
                f"unexpected={unexpected[:5]}"
            )
        for name, value in state.items():
            if tuple(own[name].shape) != tuple(value.shape):
                raise CheckpointError(
                    f"{prefix}.{name}: checkpoint shape {tuple(value.shape)} != "
                    f"model shape {tuple(own[name].shape)}"
                )
        module.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})


def collect(modules: dict[str, nn.Module]) -> dict[str, torch.Tensor]:
    """Flatten module state dicts into namespaced tensors."""
    out: dict[str, torch.Tensor] = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            out[f"{prefix}.{name}"] = value
    return out


def encode_checkpoint(tensors: dict[str, torch.Tensor], config: RunConfig, tag: str) -> bytes:
    w = BinaryWriter().raw(MAGIC).u32(VERSION).text(tag).text(config.to_yaml())
    w.u32(len(tensors))
    for name in sorted(tensors):
        w.text(name).array(tensors[name])
    return w.getvalue()


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = BinaryReader(data, source)
    try:
        r.magic(MAGIC)
        version = r.u32()
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        tag = r.text()
        config = RunConfig.from_yaml(r.text())
        tensors = {}
        for _ in range(r.u32()):
            name = r.text()
            tensors[name] = r.array()
    except ContainerError as e:
        raise CheckpointError(str(e)) from e
    except ValueError as e:
        raise CheckpointError(f"{source}: embedded config is invalid: {e}") from e
    return Checkpoint(tag=tag, config=config, tensors=tensors)


def save_checkpoint(
    path: Path,
    modules: dict[str, nn.Module],
    config: RunConfig,
    tag: str,
) -> Path:
    """Write an SCK1 checkpoint."""
    if tag not in TAGS:
        raise CheckpointError(f"unknown checkpoint tag '{tag}', expected one of {TAGS}")
    tensors = collect(modules)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors, config, tag))
    log_checkpoint("save", path, tag, len(tensors))
    return path


def load_checkpoint(path: Path, expect_tag: Optional[str] = None) -> Checkpoint:
    """
    Read an SCK1 checkpoint.

    Raises:
        CheckpointError: if the file is missing, corrupt or carries another tag
    """
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    ckpt = decode_checkpoint(path.read_bytes(), str(path))
    if expect_tag is not None and ckpt.tag != expect_tag:
        raise CheckpointError(f"{path}: expected tag '{expect_tag}', found '{ckpt.tag}'")
    log_checkpoint("load", path, ckpt.tag, len(ckpt.tensors))
    return ckpt


def check_compatible(ckpt: Checkpoint, config: RunConfig) -> None:
    """Network and world dimensions of a checkpoint must match the run config."""
    for section in ("world", "denoiser", "orchestrator", "pointer"):
        ours = getattr(config, section).model_dump()
        theirs = getattr(ckpt.config, section).model_dump()
        if ours != theirs:
            diff = sorted(k for k in ours if ours[k] != theirs.get(k))
            raise CheckpointError(
                f"checkpoint [{ckpt.tag}] {section} config differs from the run config: {diff}"
            )
    logger.debug(f"[Checkpoint] [{ckpt.tag}] compatible with run config")
