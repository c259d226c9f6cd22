"""Unit tests for run configuration and process settings."""

from pathlib import Path

import pytest
from pydantic import ValidationError

from avs.core.config import (
    ChunkGeometry,
    DenoiserConfig,
    DistillConfig,
    RunConfig,
    Settings,
    WorldConfig,
)

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


class TestWorldConfig:
    """Tests for WorldConfig."""

    def test_default_values(self):
        """Test default values."""
        cfg = WorldConfig()
        assert cfg.latent_video_fps == 6.0
        assert cfg.latent_audio_rate == 24.0
        assert cfg.audio_per_video == 4
        assert cfg.spatial_tokens == 4

    def test_rates_must_be_coupled(self):
        """Test the audio rate must be four times the video rate."""
        with pytest.raises(ValidationError, match="4 x"):
            WorldConfig(latent_video_fps=6.0, latent_audio_rate=25.0)

    def test_scaled_rates_accepted(self):
        """Test other rate pairs keep the 4x coupling."""
        cfg = WorldConfig(latent_video_fps=3.0, latent_audio_rate=12.0)
        assert cfg.audio_per_video == 4

    def test_invalid_duration_range(self):
        """Test duration range validation."""
        with pytest.raises(ValidationError):
            WorldConfig(token_duration_range=(0, 4))
        with pytest.raises(ValidationError):
            WorldConfig(token_duration_range=(5, 3))


class TestChunkGeometry:
    """Tests for ChunkGeometry."""

    def test_reference_geometry(self):
        """Test the reference chunk arithmetic."""
        g = ChunkGeometry()
        assert g.audio_frames == 36
        assert g.sink_frames == 9
        assert g.pixel_frames == 33
        assert g.budget_s == pytest.approx(1.375)

    def test_motion_cannot_exceed_chunk(self):
        """Test motion frames are bounded by the chunk length."""
        with pytest.raises(ValidationError, match="motion_frames"):
            ChunkGeometry(video_frames=4, motion_frames=5)


class TestDenoiserConfig:
    """Tests for DenoiserConfig."""

    def test_dim_must_match_heads(self):
        """Test model_dim == n_heads x head_dim."""
        with pytest.raises(ValidationError, match="n_heads x head_dim"):
            DenoiserConfig(model_dim=30, n_heads=4, head_dim=8)

    def test_head_dim_even(self):
        """Test rotary pairs need an even head dim."""
        with pytest.raises(ValidationError, match="even"):
            DenoiserConfig(model_dim=12, n_heads=4, head_dim=3)


class TestDistillConfig:
    """Tests for DistillConfig."""

    def test_default_values(self):
        """Test default values."""
        cfg = DistillConfig()
        assert cfg.student_steps == 4
        assert cfg.student_schedule == [1.0, 0.75, 0.5, 0.25]
        assert cfg.rollout_chunks == 5
        assert cfg.loss_window == 3
        assert cfg.student_lr == 2e-6
        assert cfg.fake_score_lr == 4e-7
        assert cfg.sink is True

    def test_loss_window_bounded_by_rollout(self):
        """Test loss_window <= rollout_chunks."""
        with pytest.raises(ValidationError, match="loss_window"):
            DistillConfig(rollout_chunks=3, loss_window=4)

    def test_schedule_length(self):
        """Test schedule length must equal student_steps."""
        with pytest.raises(ValidationError, match="student_schedule"):
            DistillConfig(student_steps=3)

    def test_rollout_needs_two_chunks(self):
        """Test rollouts shorter than two chunks are rejected."""
        with pytest.raises(ValidationError):
            DistillConfig(rollout_chunks=1, loss_window=1)

    def test_renoise_range(self):
        """Test renoise range ordering."""
        with pytest.raises(ValidationError, match="renoise_range"):
            DistillConfig(renoise_range=(0.5, 0.5))


class TestRunConfig:
    """Tests for RunConfig."""

    def test_default_values(self):
        """Test default values."""
        run = RunConfig()
        assert run.version == 1
        assert run.history_cap_frames == 360
        assert run.geometry.audio_frames == 36

    def test_yaml_round_trip(self, tiny_run):
        """Test to_yaml / from_yaml reproduce the config."""
        assert RunConfig.from_yaml(tiny_run.to_yaml()) == tiny_run

    def test_rejects_other_version(self):
        """Test unknown config versions are rejected."""
        with pytest.raises(ValueError, match="version"):
            RunConfig.from_yaml("version: 2\nseed: 0\n")

    def test_geometry_must_match_world(self):
        """Test chunk audio ratio must follow the world rates."""
        with pytest.raises(ValidationError, match="audio frames per video"):
            RunConfig.model_validate({"geometry": {"audio_per_video": 3}})

    def test_load_missing_file(self, tmp_path):
        """Test loading a missing file."""
        with pytest.raises(FileNotFoundError):
            RunConfig.load(tmp_path / "nope.yaml")

    def test_load_none_gives_defaults(self):
        """Test load(None) returns defaults."""
        assert RunConfig.load(None) == RunConfig()

    def test_save_and_load(self, tiny_run, tmp_path):
        """Test save then load."""
        path = tmp_path / "nested" / "run.yaml"
        tiny_run.save(path)
        assert RunConfig.load(path) == tiny_run

    @pytest.mark.parametrize("name", ["desk.yaml", "smoke.yaml"])
    def test_shipped_configs_parse(self, name):
        """Test the shipped run configs validate."""
        run = RunConfig.load(CONFIGS / "runs" / name)
        assert run.version == 1
        assert run.distill.loss_window <= run.distill.rollout_chunks


class TestSettings:
    """Tests for process Settings."""

    def test_default_values(self, monkeypatch, tmp_path):
        """Test default values."""
        monkeypatch.setenv("AVS_CONFIG_PATH", str(tmp_path))
        settings = Settings(_env_file=None)
        assert settings.output_root == Path("runs")
        assert settings.log_level == "INFO"
        assert settings.log_json is False

    def test_yaml_source(self, monkeypatch, tmp_path):
        """Test values come from the settings section of config.yml."""
        (tmp_path / "config.yml").write_text(
            "settings:\n  output_root: /data/runs\n  log_level: DEBUG\n", encoding="utf-8"
        )
        monkeypatch.setenv("AVS_CONFIG_PATH", str(tmp_path))
        settings = Settings(_env_file=None)
        assert settings.output_root == Path("/data/runs")
        assert settings.log_level == "DEBUG"

    def test_env_overrides_yaml(self, monkeypatch, tmp_path):
        """Test environment variables win over config.yml."""
        (tmp_path / "config.yml").write_text("settings:\n  log_level: DEBUG\n", encoding="utf-8")
        monkeypatch.setenv("AVS_CONFIG_PATH", str(tmp_path))
        monkeypatch.setenv("AVS_LOG_LEVEL", "WARNING")
        assert Settings(_env_file=None).log_level == "WARNING"

    def test_invalid_yaml(self, monkeypatch, tmp_path):
        """Test a malformed config.yml is reported."""
        (tmp_path / "config.yml").write_text("settings: [unclosed\n", encoding="utf-8")
        monkeypatch.setenv("AVS_CONFIG_PATH", str(tmp_path))
        with pytest.raises(RuntimeError, match="Failed to parse"):
            Settings(_env_file=None)

    def test_resolve_output(self, monkeypatch, tmp_path):
        """Test relative run dirs resolve under the output root."""
        monkeypatch.setenv("AVS_CONFIG_PATH", str(tmp_path))
        settings = Settings(_env_file=None, output_root=tmp_path / "out")
        run = RunConfig(output_dir=Path("exp"))
        assert settings.resolve_output(run) == tmp_path / "out" / "exp"
        assert settings.get_log_path(run) == tmp_path / "out" / "exp" / "logs"
        absolute = RunConfig(output_dir=tmp_path / "abs")
        assert settings.resolve_output(absolute) == tmp_path / "abs"
