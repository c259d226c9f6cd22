"""Unit tests for the joint audio-video denoiser."""

import pytest
import torch

from avs.core.config import DenoiserConfig, WorldConfig
from avs.core.errors import ShapeMismatchError, StaleCacheError
from avs.models.latent import Modality, Role
from avs.networks.jointnet import JointDenoiser, ModalityMoE, build_mask, pack
from avs.networks.layers import Attention

COND_DIM = 8


@pytest.fixture
def denoiser():
    cfg = DenoiserConfig(model_dim=8, n_heads=2, head_dim=4, n_blocks=2, expert_hidden=16)
    return JointDenoiser(cfg, WorldConfig(), COND_DIM).double().eval()


def _latents(seed: int, batch: int = 1):
    gen = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    return {
        "ref": randn(batch, 4, 1, 2, 2),
        "sink": randn(batch, 4, 9, 2, 2),
        "motion": randn(batch, 4, 9, 2, 2),
        "x_v": randn(batch, 4, 9, 2, 2),
        "x_a": randn(batch, 36, 8),
        "c_a": randn(batch, 36, COND_DIM),
    }


def _pack(parts):
    return pack(parts["ref"], parts["motion"], parts["sink"], parts["x_v"], parts["x_a"], parts["c_a"])


def _with_noisy(parts, seed: int):
    fresh = _latents(seed)
    return {**parts, "x_v": fresh["x_v"], "x_a": fresh["x_a"], "c_a": fresh["c_a"]}


PROMPT = torch.tensor([1])


class TestBuildMask:
    """Tests for the asymmetric attention mask."""

    def test_permissions(self):
        """Test condition rows see condition only and noisy rows see everything."""
        roles = [Role.REFERENCE, Role.MOTION, Role.NOISY_VIDEO, Role.NOISY_AUDIO]
        expected = torch.tensor(
            [
                [True, True, False, False],
                [True, True, False, False],
                [True, True, True, True],
                [True, True, True, True],
            ]
        )
        assert torch.equal(build_mask(roles), expected)

    def test_all_condition_pairs(self):
        """Test every condition role pair is allowed both ways."""
        roles = [Role.TEXT, Role.REFERENCE, Role.SINK, Role.MOTION]
        assert bool(build_mask(roles).all())

    def test_rejects_orchestrator_roles(self):
        """Test roles that only exist in the orchestrator."""
        with pytest.raises(ValueError):
            build_mask([Role.REFERENCE, Role.HISTORY])


class TestPack:
    """Tests for sequence packing."""

    def test_reference_token_counts(self):
        """Test token counts at the reference chunk geometry."""
        seq = _pack(_latents(0))
        counts = {role: seq.tokens.count(role) for role in Role}
        assert counts[Role.REFERENCE] == 4
        assert counts[Role.SINK] == 36
        assert counts[Role.MOTION] == 36
        assert counts[Role.NOISY_VIDEO] == 36
        assert counts[Role.NOISY_AUDIO] == 36
        assert seq.n_condition == 76
        assert len(seq.tokens) == 148

    def test_order(self):
        """Test the packed order is ref, sink, motion, noisy video, noisy audio."""
        seq = _pack(_latents(0))
        order = []
        for role in seq.tokens.roles:
            if not order or order[-1] != role:
                order.append(role)
        assert order == [Role.REFERENCE, Role.SINK, Role.MOTION, Role.NOISY_VIDEO, Role.NOISY_AUDIO]

    def test_default_sink_offset(self):
        """Test the sink window defaults to right before the motion window."""
        seq = _pack(_latents(0))
        assert seq.sink_offset == -18
        sink = seq.positions.index[seq.tokens.indices(Role.SINK)]
        assert int(sink.min()) == -18 and int(sink.max()) == -10

    def test_first_chunk_without_context(self):
        """Test packing with no sink and no motion."""
        p = _latents(0)
        seq = pack(p["ref"], None, None, p["x_v"], p["x_a"], p["c_a"])
        assert seq.tokens.count(Role.SINK) == 0
        assert seq.tokens.count(Role.MOTION) == 0
        assert seq.n_condition == 4

    def test_audio_frame_mismatch(self):
        """Test 35 audio frames for 9 video frames."""
        p = _latents(0)
        with pytest.raises(ShapeMismatchError, match="expected 36"):
            pack(p["ref"], p["motion"], p["sink"], p["x_v"], p["x_a"][:, :35], p["c_a"][:, :35])

    def test_condition_shape_mismatch(self):
        """Test context latents must share channels and spatial size."""
        p = _latents(0)
        with pytest.raises(ShapeMismatchError):
            pack(p["ref"], p["motion"][:, :2], p["sink"], p["x_v"], p["x_a"], p["c_a"])


class TestJointDenoiser:
    """Tests for JointDenoiser."""

    def test_output_shapes(self, denoiser):
        """Test velocities have the shapes of the noisy latents."""
        p = _latents(0, batch=2)
        f_v, f_a = denoiser(_pack(p), 0.5, torch.tensor([0, 1]))
        assert f_v.shape == p["x_v"].shape
        assert f_a.shape == p["x_a"].shape

    def test_cache_equivalence(self, denoiser):
        """Test cached and uncached passes agree at every student step."""
        base = _latents(0)
        cache = denoiser.build_cache(_pack(base), PROMPT)
        for i, t in enumerate([1.0, 0.75, 0.5, 0.25]):
            seq = _pack(_with_noisy(base, 10 + i))
            full_v, full_a = denoiser(seq, t, PROMPT)
            cached_v, cached_a = denoiser(seq, t, PROMPT, cache)
            torch.testing.assert_close(cached_v, full_v)
            torch.testing.assert_close(cached_a, full_a)

    def test_cache_without_prompt(self, denoiser):
        """Test the cache also works without a prompt token."""
        base = _latents(1)
        cache = denoiser.build_cache(_pack(base))
        seq = _pack(_with_noisy(base, 5))
        torch.testing.assert_close(denoiser(seq, 0.3, cache=cache)[0], denoiser(seq, 0.3)[0])

    def test_condition_states_ignore_noisy_tokens(self, denoiser):
        """Test condition hidden states do not depend on noisy latents or t."""
        base = _latents(0)
        seq_a = _pack(base)
        seq_b = _pack(_with_noisy(base, 99))
        n = seq_a.n_condition + 1
        h_a = denoiser.attend(seq_a, 0.9, PROMPT)[:, :n]
        h_b = denoiser.attend(seq_b, 0.1, PROMPT)[:, :n]
        torch.testing.assert_close(h_a, h_b, rtol=0, atol=1e-12)

    def test_stale_cache_other_motion(self, denoiser):
        """Test a cache built for other motion latents is rejected."""
        base = _latents(0)
        cache = denoiser.build_cache(_pack(base), PROMPT)
        moved = {**base, "motion": base["motion"] + 0.1}
        with pytest.raises(StaleCacheError):
            denoiser(_pack(moved), 0.5, PROMPT, cache)

    def test_stale_cache_invalidated(self, denoiser):
        """Test an invalidated cache is rejected."""
        base = _latents(0)
        seq = _pack(base)
        cache = denoiser.build_cache(seq, PROMPT).invalidate()
        with pytest.raises(StaleCacheError, match="invalidated"):
            denoiser(seq, 0.5, PROMPT, cache)

    def test_stale_cache_parameter_update(self, denoiser):
        """Test a parameter update makes the cache stale."""
        seq = _pack(_latents(0))
        cache = denoiser.build_cache(seq, PROMPT)
        with torch.no_grad():
            denoiser.video_in.weight.add_(1e-3)
        with pytest.raises(StaleCacheError, match="parameters changed"):
            denoiser(seq, 0.5, PROMPT, cache)

    def test_stale_cache_state_dict_load(self, denoiser):
        """Test loading weights makes the cache stale even when values are unchanged."""
        seq = _pack(_latents(0))
        cache = denoiser.build_cache(seq, PROMPT)
        denoiser.load_state_dict(denoiser.state_dict())
        with pytest.raises(StaleCacheError, match="parameters changed"):
            denoiser(seq, 0.5, PROMPT, cache)

    def test_fingerprint_ignores_parameters(self, denoiser):
        """Test the content hash covers condition inputs only."""
        seq = _pack(_latents(0))
        before = denoiser.fingerprint(seq, PROMPT)
        versions = denoiser.param_versions()
        with torch.no_grad():
            denoiser.video_in.weight.add_(1e-3)
        assert denoiser.fingerprint(seq, PROMPT) == before
        assert denoiser.param_versions() != versions

    def test_stale_cache_other_prompt(self, denoiser):
        """Test the prompt is part of the cache fingerprint."""
        seq = _pack(_latents(0))
        cache = denoiser.build_cache(seq, torch.tensor([0]))
        with pytest.raises(StaleCacheError):
            denoiser(seq, 0.5, torch.tensor([1]), cache)

    def test_prompt_changes_output(self, denoiser):
        """Test the character prompt conditions the output."""
        seq = _pack(_latents(0))
        f0, _ = denoiser(seq, 0.5, torch.tensor([0]))
        f1, _ = denoiser(seq, 0.5, torch.tensor([1]))
        assert not torch.allclose(f0, f1)

    def test_audio_fusion_identity_at_init(self, denoiser):
        """Test the audio encoder is the identity map at initialization."""
        x_a = _latents(0)["x_a"]
        fused = denoiser.audio_fuse(torch.zeros(1, 36, COND_DIM, dtype=torch.float64), x_a)
        torch.testing.assert_close(fused, denoiser.audio_in(x_a))

    def test_audio_fusion_frame_mismatch(self, denoiser):
        """Test c_a and x_a frame counts must agree."""
        p = _latents(0)
        with pytest.raises(ShapeMismatchError):
            denoiser.audio_fuse(p["c_a"][:, :35], p["x_a"])

    def test_invalid_time(self, denoiser):
        """Test t outside [0, 1]."""
        seq = _pack(_latents(0))
        with pytest.raises(ValueError, match="t must lie"):
            denoiser(seq, 1.5)

    def test_invalid_prompt(self, denoiser):
        """Test prompt ids outside the character range."""
        seq = _pack(_latents(0))
        with pytest.raises(ValueError, match="prompt ids"):
            denoiser(seq, 0.5, torch.tensor([99]))

    def test_wrong_channels(self, denoiser):
        """Test latents with the wrong channel count."""
        p = {k: v[:, :3] if v.dim() == 5 else v for k, v in _latents(0).items()}
        with pytest.raises(ShapeMismatchError, match="channels"):
            denoiser(_pack(p), 0.5)


class TestModalityMoE:
    """Tests for modality routing."""

    def test_single_modality(self):
        """Test an all-video sequence uses the video expert only."""
        moe = ModalityMoE(8, 16).double()
        h = torch.randn(1, 5, 8, dtype=torch.float64)
        out = moe(h, torch.zeros(5, dtype=torch.bool))
        torch.testing.assert_close(out, moe.route(h, Modality.VIDEO))

    def test_mixed_routing(self):
        """Test each token goes to its modality's expert."""
        moe = ModalityMoE(8, 16).double()
        h = torch.randn(1, 6, 8, dtype=torch.float64)
        mask = torch.tensor([False, True, False, True, True, False])
        out = moe(h, mask)
        torch.testing.assert_close(out[:, mask], moe.route(h[:, mask], Modality.AUDIO))
        torch.testing.assert_close(out[:, ~mask], moe.route(h[:, ~mask], Modality.VIDEO))


class TestAttention:
    """Tests for the attention layer."""

    def test_single_token_returns_value(self):
        """Test one token attends fully to itself."""
        attn = Attention(8, 2).double()
        x = torch.randn(1, 1, 8, dtype=torch.float64)
        out, _ = attn(x, torch.zeros(1, 2, dtype=torch.float64))
        torch.testing.assert_close(out, attn.out(attn.qkv(x)[..., 16:]))

    def test_indivisible_heads(self):
        """Test dim must be divisible by the head count."""
        with pytest.raises(ValueError):
            Attention(10, 3)
