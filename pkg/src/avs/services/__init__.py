"""Training, distillation, streaming and evaluation services."""

from avs.services.bundle import NetworkBundle
from avs.services.runner import Runner
from avs.services.stream import StreamEngine

__all__ = ["NetworkBundle", "Runner", "StreamEngine"]
