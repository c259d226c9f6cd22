"""Unit tests for data models."""

import pytest
import torch

from avs.core.errors import ShapeMismatchError
from avs.models.latent import LatentBlock, Modality, Provenance, Role, TokenStream, check_same_shape
from avs.models.report import AblationRecord, LatencyRecord, TrainReport
from avs.models.rollout import RolloutState
from avs.models.world import HistoryBuffer


class TestLatentBlock:
    """Tests for LatentBlock."""

    def test_video_axes(self, video_block):
        """Test frames and channels of a video block."""
        assert video_block.frames == 9
        assert video_block.channels == 4

    def test_audio_axes(self):
        """Test frames and channels of an audio block."""
        block = LatentBlock(Modality.AUDIO, torch.zeros(36, 8))
        assert block.frames == 36
        assert block.channels == 8

    def test_rank_checked(self):
        """Test blocks must have their modality's rank."""
        with pytest.raises(ShapeMismatchError):
            LatentBlock(Modality.AUDIO, torch.zeros(4, 9, 2, 2))

    def test_tail(self, video_block):
        """Test the last frames."""
        tail = video_block.tail(3)
        assert tail.frames == 3
        assert torch.equal(tail.data, video_block.data[:, 6:])
        assert video_block.tail(0).frames == 0
        assert video_block.tail(20).frames == 9

    def test_concat(self, video_block):
        """Test concatenation along time."""
        joined = LatentBlock.concat([video_block, video_block.tail(2)])
        assert joined.frames == 11
        assert joined.provenance == Provenance.GROUND_TRUTH

    def test_concat_mixed_provenance(self, video_block):
        """Test mixing generated content marks the result generated."""
        generated = video_block.with_data(video_block.data, Provenance.GENERATED)
        assert LatentBlock.concat([video_block, generated]).provenance == Provenance.GENERATED

    def test_concat_mixed_modality(self, video_block):
        """Test blocks of different modalities cannot be joined."""
        audio = LatentBlock(Modality.AUDIO, torch.zeros(4, 8))
        with pytest.raises(ShapeMismatchError):
            LatentBlock.concat([video_block, audio])
        with pytest.raises(ValueError):
            LatentBlock.concat([])

    def test_check_same_shape(self):
        """Test shape comparison."""
        check_same_shape(torch.zeros(2, 3), torch.ones(2, 3))
        with pytest.raises(ShapeMismatchError, match="noise"):
            check_same_shape(torch.zeros(2, 3), torch.zeros(3, 2), "noise")


class TestTokenStream:
    """Tests for TokenStream."""

    def test_block(self):
        """Test spatial expansion of frames."""
        stream = TokenStream.block(Role.MOTION, Modality.VIDEO, range(2), True, spatial_tokens=3)
        assert len(stream) == 6
        assert stream.frames == (0, 0, 0, 1, 1, 1)
        assert stream.spatial == (0, 1, 2, 0, 1, 2)

    def test_concat_and_masks(self):
        """Test role queries on concatenated streams."""
        stream = TokenStream.concat(
            [
                TokenStream.block(Role.REFERENCE, Modality.VIDEO, range(1), True),
                TokenStream.block(Role.NOISY_AUDIO, Modality.AUDIO, range(2), False),
            ]
        )
        assert stream.indices(Role.NOISY_AUDIO) == [1, 2]
        assert stream.count(Role.REFERENCE) == 1
        assert stream.condition_mask().tolist() == [True, False, False]
        assert stream.audio_mask().tolist() == [False, True, True]

    def test_length_mismatch(self):
        """Test inconsistent fields are rejected."""
        with pytest.raises(ShapeMismatchError):
            TokenStream(roles=(Role.TEXT,), modalities=(), frames=(0,), clean=(True,))


class TestHistoryBuffer:
    """Tests for HistoryBuffer."""

    def test_from_alignment(self):
        """Test a partially covered token keeps its covered frames."""
        history = HistoryBuffer.from_alignment(torch.zeros(12, 2), (4, 4, 4), 6)
        assert history.token_index == [0, 1]
        assert history.durations == [4, 2]
        assert history.frames == 6

    def test_append_proportional(self):
        """Test frames are split in proportion to cursor progress."""
        history = HistoryBuffer.empty(2)
        history.append_chunk(torch.zeros(12, 2), 0.0, 1.5, 10)
        assert history.token_index == [0, 1]
        assert history.durations == [8, 4]

    def test_append_merges_continuing_token(self):
        """Test a token continuing into the next chunk is merged."""
        history = HistoryBuffer.empty(2)
        history.append_chunk(torch.zeros(12, 2), 0.0, 1.5, 10)
        history.append_chunk(torch.zeros(12, 2), 1.5, 2.5, 10)
        assert history.token_index == [0, 1, 2]
        assert history.durations == [8, 10, 6]
        assert history.frames == 24

    def test_append_without_progress(self):
        """Test a stalled cursor attributes the chunk to the current token."""
        history = HistoryBuffer.empty(2)
        history.append_chunk(torch.zeros(12, 2), 3.25, 3.25, 10)
        assert history.token_index == [3]
        assert history.durations == [12]

    def test_append_at_end(self):
        """Test progress at the transcript end goes to the last token."""
        history = HistoryBuffer.empty(2)
        history.append_chunk(torch.zeros(7, 2), 4.0, 4.0, 4)
        assert history.token_index == [3]
        assert sum(history.durations) == 7

    def test_counts_always_sum(self):
        """Test rounding never loses frames."""
        history = HistoryBuffer.empty(2)
        history.append_chunk(torch.zeros(36, 2), 0.3, 4.7, 10)
        assert sum(history.durations) == 36

    def test_misaligned(self):
        """Test durations must cover the audio exactly."""
        with pytest.raises(ShapeMismatchError):
            HistoryBuffer(torch.zeros(5, 2), [0], [4])

    def test_transcript(self):
        """Test token ids of the buffered history."""
        history = HistoryBuffer(torch.zeros(6, 2), [1, 2], [3, 3])
        assert history.transcript([10, 11, 12, 13]) == [11, 12]


class TestRolloutState:
    """Tests for RolloutState."""

    def test_cursor_clamped(self):
        """Test the cursor never decreases and never passes N."""
        state = RolloutState(history=HistoryBuffer.empty(2))
        assert state.advance_cursor(2.5, 10) == 2.5
        assert state.advance_cursor(1.0, 10) == 2.5
        assert state.cursor_regressions == 1
        assert state.advance_cursor(15.0, 10) == 10.0
        assert state.finished(10)

    def test_sink_immutable(self, video_block):
        """Test the sink can only be set once."""
        state = RolloutState(history=HistoryBuffer.empty(2))
        state.set_sink(video_block)
        with pytest.raises(RuntimeError):
            state.set_sink(video_block)
        assert state.sink is video_block


class TestReports:
    """Tests for report records."""

    def test_real_time(self):
        """Test the real-time flag."""
        assert LatencyRecord(wall_s=1.285, budget_s=1.375).real_time
        assert not LatencyRecord(wall_s=1.5, budget_s=1.375).real_time
        assert "real_time" in LatencyRecord().model_dump()

    def test_stage_sum(self):
        """Test the stage sum."""
        record = LatencyRecord(generate_s=0.96, decode_s=0.3, preprocess_s=0.05, write_s=0.025)
        assert record.stage_sum_s == pytest.approx(1.335)

    def test_negative_duration(self):
        """Test negative stage durations are rejected."""
        with pytest.raises(ValueError):
            LatencyRecord(generate_s=-1.0)

    def test_sink_helps(self):
        """Test the ablation comparison."""
        assert AblationRecord(seed=0, n_chunks=5, drift_with_sink=0.1, drift_without_sink=0.2).sink_helps
        assert not AblationRecord(seed=0, n_chunks=5, drift_with_sink=0.3, drift_without_sink=0.2).sink_helps

    def test_loss_ratio(self):
        """Test the train report loss ratio."""
        assert TrainReport(steps=1, initial_flow_loss=2.0, final_flow_loss=0.5).loss_ratio == 0.25
        assert TrainReport(steps=1).loss_ratio == 0.0
