"""Unit tests for checkpoint, container, sample and trace files."""

import pytest
import torch

from avs.core.config import RunConfig
from avs.core.errors import CheckpointError, ContainerError
from avs.models.report import TrainRecord
from avs.parsers.checkpoint import check_compatible, load_checkpoint, save_checkpoint
from avs.parsers.samples import read_samples, write_samples
from avs.parsers.stream_container import (
    AsyncStreamWriter,
    decode_container,
    encode_header,
    encode_record,
    read_container,
    write_container,
)
from avs.parsers.traces import TraceWriter, read_trace
from avs.services.bundle import NetworkBundle
from avs.services.synthworld import gen_sample


class TestCheckpoint:
    """Tests for SCK1 checkpoints."""

    def test_bundle_round_trip(self, tiny_run, tiny_bundle, tmp_path):
        """Test a saved bundle restores identical parameters."""
        path = tiny_bundle.save(tmp_path / "teacher.sck", tiny_run, "teacher")
        ckpt = load_checkpoint(path, expect_tag="teacher")
        assert ckpt.tag == "teacher"
        assert ckpt.config == tiny_run
        restored = NetworkBundle.from_checkpoint(ckpt, tiny_run)
        for name, module in tiny_bundle.modules().items():
            ours = module.state_dict()
            theirs = restored.modules()[name].state_dict()
            assert ours.keys() == theirs.keys()
            for key in ours:
                assert torch.equal(ours[key], theirs[key]), f"{name}.{key}"

    def test_extra_namespace(self, tiny_run, tiny_bundle, tmp_path):
        """Test extra modules are stored under their own prefix."""
        path = tiny_bundle.save(
            tmp_path / "s.sck", tiny_run, "student_stage1", extra={"fake_score": tiny_bundle.denoiser}
        )
        ckpt = load_checkpoint(path)
        assert ckpt.has("fake_score")
        assert ckpt.namespace("fake_score").keys() == ckpt.namespace("denoiser").keys()

    def test_wrong_tag(self, tiny_run, tiny_bundle, tmp_path):
        """Test the tag is enforced."""
        path = tiny_bundle.save(tmp_path / "teacher.sck", tiny_run, "teacher")
        with pytest.raises(CheckpointError, match="expected tag 'student_stage2'"):
            load_checkpoint(path, expect_tag="student_stage2")

    def test_unknown_tag(self, tiny_run, tiny_bundle, tmp_path):
        """Test only the three checkpoint tags can be written."""
        with pytest.raises(CheckpointError, match="unknown checkpoint tag"):
            tiny_bundle.save(tmp_path / "x.sck", tiny_run, "student")

    def test_missing(self, tmp_path):
        """Test a missing checkpoint."""
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.sck")

    def test_bad_magic(self, tmp_path):
        """Test a file of another format is rejected."""
        path = tmp_path / "bad.sck"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_namespace(self, tiny_run, tiny_bundle, tmp_path):
        """Test loading a namespace the checkpoint lacks."""
        path = save_checkpoint(tmp_path / "d.sck", {"denoiser": tiny_bundle.denoiser}, tiny_run, "teacher")
        with pytest.raises(CheckpointError, match="'pap'"):
            load_checkpoint(path).load_into(tiny_bundle.pointer, "pap")

    def test_incompatible_config(self, tiny_run, tiny_bundle, tmp_path):
        """Test a checkpoint of other network dimensions is refused."""
        path = tiny_bundle.save(tmp_path / "teacher.sck", tiny_run, "teacher")
        other = RunConfig.model_validate(
            tiny_run.model_dump(mode="json") | {"denoiser": {**tiny_run.denoiser.model_dump(), "n_blocks": 3}}
        )
        with pytest.raises(CheckpointError, match="denoiser"):
            check_compatible(load_checkpoint(path), other)


class TestStreamContainer:
    """Tests for SCS1 stream containers."""

    def test_round_trip(self, identity_container, tmp_path):
        """Test a written container reads back."""
        path = write_container(tmp_path / "s.scs", identity_container.header, identity_container.records)
        back = read_container(path)
        assert back.header.transcript == identity_container.header.transcript
        assert back.header.config == identity_container.header.config
        assert back.cursors == identity_container.cursors
        torch.testing.assert_close(back.video(), identity_container.video())
        torch.testing.assert_close(back.audio(), identity_container.audio())

    def test_truncated_record_dropped(self, identity_container):
        """Test a partially written trailing record is dropped."""
        data = encode_header(identity_container.header)
        data += b"".join(encode_record(r) for r in identity_container.records[:2])
        partial = encode_record(identity_container.records[2])
        container = decode_container(data + partial[: len(partial) // 2])
        assert len(container.records) == 2
        assert container.cursors == identity_container.cursors[:2]

    def test_header_only(self, identity_container):
        """Test a container with no records."""
        container = decode_container(encode_header(identity_container.header))
        assert container.records == []
        assert container.video() is None

    def test_bad_magic(self):
        """Test foreign data is rejected."""
        with pytest.raises(ContainerError):
            decode_container(b"XXXX" + bytes(8))

    def test_missing(self, tmp_path):
        """Test a missing container."""
        with pytest.raises(ContainerError, match="not found"):
            read_container(tmp_path / "none.scs")

    async def test_async_writer(self, identity_container, tmp_path):
        """Test records appended asynchronously read back in order."""
        path = tmp_path / "async.scs"
        async with AsyncStreamWriter(path, identity_container.header) as writer:
            for record in identity_container.records:
                await writer.write(record)
        assert writer.records_written == len(identity_container.records)
        assert read_container(path).cursors == identity_container.cursors


class TestSamples:
    """Tests for SCW1 sample files."""

    def test_round_trip(self, tiny_run, tmp_path):
        """Test samples survive a write and read."""
        samples = [gen_sample(tiny_run.world, 6, seed) for seed in range(3)]
        path = write_samples(tmp_path / "world.scw", tiny_run.world, samples)
        cfg, back = read_samples(path)
        assert cfg == tiny_run.world
        assert [s.tokens for s in back] == [s.tokens for s in samples]
        assert [s.durations for s in back] == [s.durations for s in samples]
        torch.testing.assert_close(back[0].audio.data, samples[0].audio.data.float())

    def test_missing(self, tmp_path):
        """Test a missing sample file."""
        with pytest.raises(ContainerError):
            read_samples(tmp_path / "none.scw")


class TestTraces:
    """Tests for JSONL traces."""

    def test_write_read(self, tmp_path):
        """Test records read back as models."""
        path = tmp_path / "traces" / "train.jsonl"
        writer = TraceWriter(path)
        writer.write_all(
            [
                TrainRecord(step=0, phase="warmup", pap_loss=1.0, total_loss=1.0),
                TrainRecord(step=1, phase="joint", flow_loss=0.5, pap_loss=0.8, total_loss=1.3),
            ]
        )
        assert writer.count == 2
        records = read_trace(path, TrainRecord)
        assert [r.step for r in records] == [0, 1]
        assert records[1].flow_loss == 0.5

    def test_append(self, tmp_path):
        """Test append mode keeps earlier lines."""
        path = tmp_path / "t.jsonl"
        TraceWriter(path).write(TrainRecord(step=0, phase="warmup", pap_loss=1.0, total_loss=1.0))
        TraceWriter(path, append=True).write(TrainRecord(step=1, phase="warmup", pap_loss=1.0, total_loss=1.0))
        assert len(read_trace(path, TrainRecord)) == 2

    def test_bad_line(self, tmp_path):
        """Test an invalid line names its position."""
        path = tmp_path / "t.jsonl"
        path.write_text('{"step": 0}\n', encoding="utf-8")
        with pytest.raises(ContainerError, match=":1:"):
            read_trace(path, TrainRecord)
