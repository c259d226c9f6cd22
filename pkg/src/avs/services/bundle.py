"""Building, saving and restoring the three networks as one unit."""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from avs.core.config import RunConfig
from avs.networks.jointnet import JointDenoiser
from avs.networks.orchestrator import Orchestrator
from avs.networks.pap import ProgressPointer
from avs.parsers.checkpoint import Checkpoint, check_compatible, save_checkpoint
from avs.services.generator import ChunkGenerator


@dataclass
class NetworkBundle:
    """Orchestrator, denoiser and pointer of one run."""

    orchestrator: Orchestrator
    denoiser: JointDenoiser
    pointer: ProgressPointer

    @classmethod
    def build(cls, run: RunConfig, dtype: torch.dtype = torch.float32) -> "NetworkBundle":
        orchestrator = Orchestrator(run.orchestrator, run.world, run.history_cap_frames)
        denoiser = JointDenoiser(run.denoiser, run.world, orchestrator.dim)
        pointer = ProgressPointer(run.pointer, orchestrator.dim)
        bundle = cls(orchestrator, denoiser, pointer)
        for module in bundle.modules().values():
            module.to(dtype)
        return bundle

    @classmethod
    def from_checkpoint(
        cls, ckpt: Checkpoint, run: RunConfig, denoiser_namespace: str = "denoiser"
    ) -> "NetworkBundle":
        """Rebuild from a checkpoint; the denoiser may come from another namespace."""
        check_compatible(ckpt, run)
        bundle = cls.build(run)
        ckpt.load_into(bundle.orchestrator, "orchestrator")
        ckpt.load_into(bundle.pointer, "pap")
        ckpt.load_into(bundle.denoiser, denoiser_namespace)
        return bundle

    def modules(self) -> dict[str, nn.Module]:
        return {"denoiser": self.denoiser, "orchestrator": self.orchestrator, "pap": self.pointer}

    def parameters(self) -> list[nn.Parameter]:
        return [p for m in self.modules().values() for p in m.parameters()]

    def generator(self) -> ChunkGenerator:
        return ChunkGenerator(self.denoiser, self.orchestrator, self.pointer, self.denoiser.world)

    def freeze_conditioning(self) -> None:
        """Freeze the orchestrator and pointer (shared by every distillation branch)."""
        for module in (self.orchestrator, self.pointer):
            module.requires_grad_(False)
            module.eval()

    def save(
        self,
        path: Path,
        run: RunConfig,
        tag: str,
        extra: Optional[dict[str, nn.Module]] = None,
    ) -> Path:
        modules = self.modules()
        if extra:
            modules.update(extra)
        return save_checkpoint(path, modules, run, tag)
