"""Shared pytest fixtures and configuration."""

import os
from pathlib import Path
from typing import Callable

import pytest
import torch
from torch import nn

from avs.core.config import RunConfig
from avs.models.latent import LatentBlock, Modality
from avs.parsers.stream_container import ChunkRecord, StreamContainer, StreamHeader
from avs.models.report import LatencyRecord
from avs.models.world import SynthSample
from avs.services.bundle import NetworkBundle
from avs.services.codec import ToyCodec
from avs.services.synthworld import WorldStream, gen_sample

# Keep test runs independent of any developer config.yml / .env
os.environ.setdefault("AVS_CONFIG_PATH", str(Path(__file__).parent / "_no_config"))

REPO_ROOT = Path(__file__).resolve().parents[1]

# Two-block, dim-8 networks over a 3-frame chunk: small enough for
# float64 finite-difference checks and sub-second rollouts.
TINY_RUN = {
    "seed": 0,
    "world": {
        "vocab_size": 8,
        "video_channels": 2,
        "video_spatial": [1, 2],
        "audio_channels": 2,
        "n_characters": 2,
    },
    "geometry": {"video_frames": 3, "motion_frames": 3},
    "denoiser": {"model_dim": 8, "n_heads": 2, "head_dim": 4, "n_blocks": 2, "expert_hidden": 16},
    "orchestrator": {
        "model_dim": 8,
        "n_heads": 2,
        "n_blocks": 1,
        "ffn_hidden": 16,
        "text_window": 6,
        "ref_audio_frames": 4,
    },
    "pointer": {"key_dim": 8, "offset_hidden": 8},
    "train": {
        "steps": 4,
        "orchestrator_warmup_steps": 1,
        "batch_size": 2,
        "sample_tokens": [12, 16],
        "checkpoint_every": 2,
        "log_every": 1,
    },
    "distill": {
        "stage1_steps": 1,
        "stage2_steps": 1,
        "student_steps": 2,
        "student_schedule": [1.0, 0.5],
        "rollout_chunks": 3,
        "loss_window": 2,
        "batch_size": 1,
        "log_every": 1,
    },
    "stream": {
        "n_chunks": 4,
        "transcript_tokens": 24,
        "segment_s": 2.0,
        "probe_s": 1.0,
        "reference_samples": 8,
    },
}


@pytest.fixture
def tiny_run(tmp_path: Path) -> RunConfig:
    """Tiny run configuration writing under a temporary directory."""
    return RunConfig.model_validate({**TINY_RUN, "output_dir": str(tmp_path / "run")})


@pytest.fixture
def tiny_bundle(tiny_run: RunConfig) -> NetworkBundle:
    """Freshly initialised float32 networks of the tiny run."""
    return NetworkBundle.build(tiny_run)


@pytest.fixture
def bundle64(tiny_run: RunConfig) -> NetworkBundle:
    """Float64 networks of the tiny run, for gradient checks."""
    return NetworkBundle.build(tiny_run, torch.float64)


@pytest.fixture
def smoke_config() -> Path:
    """Path of the shipped smoke-run config."""
    return REPO_ROOT / "configs" / "runs" / "smoke.yaml"


@pytest.fixture
def world_sample(tiny_run: RunConfig) -> SynthSample:
    """A world sample whose length is a whole number of tiny chunks."""
    for seed in range(100):
        sample = gen_sample(tiny_run.world, 24, seed)
        if sample.video.frames % tiny_run.geometry.video_frames == 0:
            return sample
    raise RuntimeError("no evenly chunked sample found")


@pytest.fixture
def identity_container(tiny_run: RunConfig, world_sample: SynthSample) -> StreamContainer:
    """Ground-truth latents packed as a stream container (the identity pipeline)."""
    stream = WorldStream(world_sample, tiny_run.geometry)
    codec = ToyCodec(tiny_run.world)
    header = StreamHeader(
        config=tiny_run, transcript=world_sample.tokens, prompt_id=world_sample.prompt_id
    )
    records = []
    for k in range(stream.n_chunks):
        video = stream.video_chunk(k)
        latency = LatencyRecord(
            chunk_index=k,
            cursor=stream.endpoint(k),
            generate_s=0.1,
            decode_s=0.02,
            preprocess_s=0.01,
            write_s=0.01,
            wall_s=0.14,
            budget_s=tiny_run.geometry.budget_s,
        )
        records.append(
            ChunkRecord(
                latency=latency,
                video=video.data,
                audio=stream.audio_chunk(k).data,
                frames=codec.decode(video),
            )
        )
    return StreamContainer(header=header, records=records)


def _central_difference(loss_fn: Callable[[], torch.Tensor], flat: torch.Tensor, i: int, eps: float) -> float:
    with torch.no_grad():
        original = float(flat[i])
        flat[i] = original + eps
        up = float(loss_fn())
        flat[i] = original - eps
        down = float(loss_fn())
        flat[i] = original
    return (up - down) / (2 * eps)


@pytest.fixture
def fd_check() -> Callable[..., int]:
    """
    Compare autograd parameter gradients with central differences.

    Checks a few seeded entries of every parameter tensor of ``module`` and
    returns the number of entries checked.
    """

    def check(
        loss_fn: Callable[[], torch.Tensor],
        module: nn.Module,
        per_tensor: int = 3,
        eps: float = 1e-6,
        rtol: float = 1e-4,
        atol: float = 1e-8,
    ) -> int:
        module.zero_grad(set_to_none=True)
        loss_fn().backward()
        gen = torch.Generator().manual_seed(0)
        checked = 0
        for name, param in module.named_parameters():
            if not param.requires_grad:
                continue
            flat = param.data.view(-1)
            grad = torch.zeros_like(flat) if param.grad is None else param.grad.view(-1)
            picks = torch.randperm(flat.numel(), generator=gen)[:per_tensor].tolist()
            for i in picks:
                numeric = _central_difference(loss_fn, flat, i, eps)
                analytic = float(grad[i])
                assert abs(analytic - numeric) <= atol + rtol * max(abs(numeric), abs(analytic)), (
                    f"{name}[{i}]: autograd {analytic:.10g} vs central difference {numeric:.10g}"
                )
                checked += 1
        return checked

    return check


@pytest.fixture
def video_block() -> LatentBlock:
    """Random 9-frame video block at reference world geometry."""
    gen = torch.Generator().manual_seed(1)
    return LatentBlock(Modality.VIDEO, torch.randn(4, 9, 2, 2, generator=gen))
