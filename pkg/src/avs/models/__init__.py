"""Data types: latent blocks, world records, rollout state and reports."""

from avs.models.latent import LatentBlock, Modality, Provenance, Role, TokenStream
from avs.models.report import LatencyRecord, StreamReport, TrainReport
from avs.models.rollout import RolloutState
from avs.models.world import HistoryBuffer, SynthSample

__all__ = [
    "HistoryBuffer",
    "LatencyRecord",
    "LatentBlock",
    "Modality",
    "Provenance",
    "Role",
    "RolloutState",
    "StreamReport",
    "SynthSample",
    "TokenStream",
    "TrainReport",
]
