"""Unit tests for modality-aware rotary positions."""

import pytest
import torch

from avs.models.latent import Modality, Role, TokenStream
from avs.networks.rope import (
    MODALITY_SCALE,
    PositionAssignment,
    angle,
    apply_rotary,
    assign_positions,
    default_sink_offset,
)

HEAD_DIM = 8


def _chunk_tokens(k: int = 9, s: int = 9, t: int = 9) -> TokenStream:
    return TokenStream.concat(
        [
            TokenStream.block(Role.REFERENCE, Modality.VIDEO, range(1), True),
            TokenStream.block(Role.SINK, Modality.VIDEO, range(s), True),
            TokenStream.block(Role.MOTION, Modality.VIDEO, range(k), True),
            TokenStream.block(Role.NOISY_VIDEO, Modality.VIDEO, range(t), False),
            TokenStream.block(Role.NOISY_AUDIO, Modality.AUDIO, range(4 * t), False),
        ]
    )


class TestAngle:
    """Tests for per-pair rotation angles."""

    def test_audio_video_phase_alignment(self):
        """Test audio index 4k and video index k share every angle."""
        for tau in range(-16, 17):
            for p in range(HEAD_DIM // 2):
                a = angle(4 * tau, p, Modality.AUDIO, HEAD_DIM)
                v = angle(tau, p, Modality.VIDEO, HEAD_DIM)
                assert abs(a - v) <= 1e-12 * max(1.0, abs(v))

    def test_audio_scale(self):
        """Test audio frequencies are scaled by a quarter."""
        assert MODALITY_SCALE[Modality.AUDIO] == 0.25
        assert angle(1, 0, Modality.AUDIO, HEAD_DIM) == pytest.approx(0.25)

    def test_frequency_ladder(self):
        """Test base^(-2p/d) frequencies."""
        assert angle(3, 1, Modality.VIDEO, HEAD_DIM, base=10_000.0) == pytest.approx(
            3 * 10_000.0 ** (-2 / HEAD_DIM)
        )

    def test_pair_out_of_range(self):
        """Test pair indices past head_dim / 2."""
        with pytest.raises(ValueError):
            angle(0, HEAD_DIM // 2, Modality.VIDEO, HEAD_DIM)


class TestAssignPositions:
    """Tests for global-timeline placement."""

    def test_default_sink_offset(self):
        """Test the sink sits right before motion."""
        assert default_sink_offset(9, 9) == -18

    def test_motion_and_sink_windows(self):
        """Test motion maps to -K..-1 and sink to offset..offset+S-1."""
        tokens = _chunk_tokens()
        pos = assign_positions(tokens, motion_frames=9, sink_offset=-18)
        motion = pos.index[tokens.indices(Role.MOTION)].tolist()
        sink = pos.index[tokens.indices(Role.SINK)].tolist()
        assert motion == list(range(-9, 0))
        assert sink == list(range(-18, -9))

    def test_noisy_and_atemporal(self):
        """Test noisy tokens keep local frames and reference tokens sit at 0."""
        tokens = _chunk_tokens()
        pos = assign_positions(tokens, 9, -18)
        assert pos.index[tokens.indices(Role.NOISY_VIDEO)].tolist() == list(range(9))
        assert pos.index[tokens.indices(Role.NOISY_AUDIO)].tolist() == list(range(36))
        assert pos.index[tokens.indices(Role.REFERENCE)].tolist() == [0]

    def test_audio_scale_per_token(self):
        """Test audio tokens carry the quarter scale."""
        tokens = _chunk_tokens()
        pos = assign_positions(tokens, 9, -18)
        audio = tokens.indices(Role.NOISY_AUDIO)
        video = tokens.indices(Role.NOISY_VIDEO)
        assert set(pos.scale[audio].tolist()) == {0.25}
        assert set(pos.scale[video].tolist()) == {1.0}

    def test_overlapping_sink_rejected(self):
        """Test a sink window overlapping the motion window."""
        with pytest.raises(ValueError, match="overlaps"):
            assign_positions(_chunk_tokens(), 9, -12)

    def test_no_motion_no_overlap_check(self):
        """Test the first chunk (no motion) accepts any sink offset."""
        pos = assign_positions(_chunk_tokens(k=0, s=0), 0, 0)
        assert len(pos) == 1 + 9 + 36


class TestApplyRotary:
    """Tests for apply_rotary."""

    def test_norm_preserved(self):
        """Test rotations keep vector norms."""
        x = torch.randn(3, HEAD_DIM, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        ang = PositionAssignment.sequential(3).angles(HEAD_DIM)
        torch.testing.assert_close(apply_rotary(x, ang).norm(dim=-1), x.norm(dim=-1))

    def test_relative_position(self):
        """Test q.k after rotation depends only on the index difference."""
        gen = torch.Generator().manual_seed(1)
        q = torch.randn(HEAD_DIM, dtype=torch.float64, generator=gen)
        k = torch.randn(HEAD_DIM, dtype=torch.float64, generator=gen)

        def score(i: int, j: int) -> float:
            pos = PositionAssignment(torch.tensor([i, j]), torch.ones(2, dtype=torch.float64))
            ang = pos.angles(HEAD_DIM)
            rq = apply_rotary(q[None], ang[:1])[0]
            rk = apply_rotary(k[None], ang[1:])[0]
            return float(rq @ rk)

        for offset in (-18, -9, 0, 5):
            assert score(3, 3 + offset) == pytest.approx(score(10, 10 + offset), abs=1e-5)

    def test_cross_modal_relative_position(self):
        """Test an audio token at 4k sees a video token at k as same-time."""
        gen = torch.Generator().manual_seed(2)
        q = torch.randn(HEAD_DIM, dtype=torch.float64, generator=gen)
        k = torch.randn(HEAD_DIM, dtype=torch.float64, generator=gen)
        pos = PositionAssignment(
            torch.tensor([4 * 7, 7, 0]), torch.tensor([0.25, 1.0, 1.0], dtype=torch.float64)
        )
        ang = pos.angles(HEAD_DIM)
        audio_q = apply_rotary(q[None], ang[:1])[0]
        video_k = apply_rotary(k[None], ang[1:2])[0]
        zero_q = apply_rotary(q[None], ang[2:3])[0]
        zero_k = apply_rotary(k[None], ang[2:3])[0]
        assert float(audio_q @ video_k) == pytest.approx(float(zero_q @ zero_k), abs=1e-10)
