"""Torch modules: rotary positions, joint denoiser, orchestrator, pointer."""

from avs.networks.jointnet import JointDenoiser
from avs.networks.orchestrator import Orchestrator
from avs.networks.pap import ProgressPointer

__all__ = ["JointDenoiser", "Orchestrator", "ProgressPointer"]
