"""Autograd gradients against central differences in float64."""

import pytest
import torch

from avs.services import flow
from avs.services.generator import ground_truth_batch, make_noise


@pytest.fixture
def flow_case(tiny_run, bundle64):
    batch = ground_truth_batch(tiny_run, 3, 1, context_prob=1.0, token_range=(12, 12))
    z_v, z_a = batch.z_v.double(), batch.z_a.double()
    eps_v, eps_a = make_noise(tuple(z_v.shape), tuple(z_a.shape), 5, torch.float64)
    state = flow.corrupt(z_v, z_a, eps_v, eps_a, 0.5)
    gen = bundle64.generator()

    def loss():
        f_v, f_a = gen.velocity(state.x_v, state.x_a, 0.5, batch.ctx)
        return flow.flow_loss(f_v, f_a, z_v, z_a, eps_v, eps_a)

    return loss, batch, z_a


class TestFlowLossGradients:
    """Tests for flow-matching loss gradients."""

    def test_denoiser(self, flow_case, bundle64, fd_check):
        """Test denoiser parameter gradients."""
        loss, _, _ = flow_case
        assert fd_check(loss, bundle64.denoiser) > 0

    def test_orchestrator(self, flow_case, bundle64, fd_check):
        """Test orchestrator gradients through the audio condition."""
        loss, _, _ = flow_case
        assert fd_check(loss, bundle64.orchestrator) > 0


class TestPointerGradients:
    """Tests for pointer loss gradients."""

    def test_pointer(self, flow_case, bundle64, fd_check):
        """Test pointer parameter gradients on clean audio."""
        _, batch, z_a = flow_case
        gen = bundle64.generator()

        def loss():
            out = gen.point(batch.ctx, z_a)[0]
            return bundle64.pointer.loss(out, batch.endpoints[0])

        assert fd_check(loss, bundle64.pointer) > 0
