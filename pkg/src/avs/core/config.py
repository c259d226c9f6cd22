"""Application and experiment configuration.

Two layers live here:

* ``Settings`` - process-level settings (paths, log level) resolved with
  pydantic-settings. Priority (highest first): init arguments, environment
  variables (``AVS_`` prefix), ``.env`` file, ``config.yml`` ``settings:``
  section, defaults.
* ``RunConfig`` - the versioned experiment config (world, networks,
  training, distillation, streaming) stored as YAML next to every run so an
  experiment can be replayed from (config, seed).
"""

import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from dotenv import load_dotenv
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic_settings.sources import PydanticBaseSettingsSource

load_dotenv()

CONFIG_VERSION = 1

# Physical rates the latent rates stand for. Documentation constants only.
PHYSICAL_VIDEO_FPS = 24
PHYSICAL_AUDIO_HZ = 49_152
VIDEO_VAE_TEMPORAL_STRIDE = 4
AUDIO_VAE_STRIDE = 2048


class YamlSettingsSource(PydanticBaseSettingsSource):
    """
    Settings source that reads the ``settings:`` section of config.yml.

    Nested keys are flattened to match env var naming
    (``stream.overlap`` -> ``stream_overlap``). A missing file yields no
    values so defaults and env vars still apply.
    """

    def __init__(self, settings_cls: type[BaseSettings], yaml_file: Path):
        super().__init__(settings_cls)
        self.yaml_file = yaml_file
        self._yaml_data: dict[str, Any] = {}
        self._load_yaml()

    def _load_yaml(self) -> None:
        """Load and parse the YAML file."""
        if not self.yaml_file.exists():
            return

        try:
            with open(self.yaml_file, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise RuntimeError(
                f"Failed to parse {self.yaml_file}: {e}\nPlease check your YAML syntax."
            ) from e

        self._yaml_data = self._flatten_settings(data.get("settings", {}) or {})

    def _flatten_settings(self, data: dict, prefix: str = "") -> dict:
        """Flatten nested dict to match env var naming."""
        result = {}
        for key, value in data.items():
            flat_key = f"{prefix}_{key}" if prefix else key
            if isinstance(value, dict):
                result.update(self._flatten_settings(value, flat_key))
            else:
                result[flat_key] = value
        return result

    def get_field_value(self, field: Any, field_name: str) -> tuple[Any, str, bool]:
        """Get value for a specific field from YAML data."""
        value = self._yaml_data.get(field_name)
        return value, field_name, value is not None

    def __call__(self) -> dict[str, Any]:
        """Return all settings from YAML."""
        return self._yaml_data


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


class WorldConfig(BaseModel):
    """Synthetic character world: vocabulary, latent geometry and rates."""

    vocab_size: int = Field(default=24, ge=2)
    video_channels: int = Field(default=4, ge=1)
    video_spatial: tuple[int, int] = Field(default=(2, 2))
    audio_channels: int = Field(default=8, ge=1)
    latent_video_fps: float = Field(default=6.0, gt=0)
    latent_audio_rate: float = Field(default=24.0, gt=0)
    token_duration_range: tuple[int, int] = Field(default=(2, 6))
    n_characters: int = Field(default=4, ge=1, description="Distinct identities / prompt ids")
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_rates(self) -> "WorldConfig":
        if self.latent_audio_rate != 4 * self.latent_video_fps:
            raise ValueError(
                f"latent_audio_rate ({self.latent_audio_rate}) must be 4 x "
                f"latent_video_fps ({self.latent_video_fps})"
            )
        lo, hi = self.token_duration_range
        if lo < 1:
            raise ValueError(f"token_duration_range min must be >= 1, got {lo}")
        if hi < lo:
            raise ValueError(f"token_duration_range max < min: {self.token_duration_range}")
        if min(self.video_spatial) < 1:
            raise ValueError(f"video_spatial must be positive, got {self.video_spatial}")
        return self

    @property
    def audio_per_video(self) -> int:
        """Audio latent frames per video latent frame (always 4)."""
        return int(round(self.latent_audio_rate / self.latent_video_fps))

    @property
    def spatial_tokens(self) -> int:
        """Video tokens per latent frame (1x1x1 patchify)."""
        return self.video_spatial[0] * self.video_spatial[1]


class ChunkGeometry(BaseModel):
    """Streaming chunk geometry in latent frames."""

    video_frames: int = Field(default=9, ge=1)
    motion_frames: int = Field(default=9, ge=0)
    audio_per_video: int = Field(default=4, ge=1)
    pixel_fps: float = Field(default=float(PHYSICAL_VIDEO_FPS), gt=0)

    @model_validator(mode="after")
    def _check_motion(self) -> "ChunkGeometry":
        if self.motion_frames > self.video_frames:
            raise ValueError("motion_frames cannot exceed video_frames per chunk")
        return self

    @property
    def audio_frames(self) -> int:
        """Audio latent frames per chunk (36 at reference geometry)."""
        return self.audio_per_video * self.video_frames

    @property
    def sink_frames(self) -> int:
        """The sink is the whole first chunk."""
        return self.video_frames

    @property
    def pixel_frames(self) -> int:
        """Decoded frames per chunk: 1 + (T - 1) x stride (33 for 9 latents)."""
        return 1 + (self.video_frames - 1) * VIDEO_VAE_TEMPORAL_STRIDE

    @property
    def budget_s(self) -> float:
        """Playback duration of one chunk (33/24 s at reference geometry)."""
        return self.pixel_frames / self.pixel_fps


class DenoiserConfig(BaseModel):
    """Joint audio-video denoiser (toy stand-in for the large DiT backbone)."""

    model_config = ConfigDict(protected_namespaces=())

    model_dim: int = Field(default=32, ge=2)
    n_heads: int = Field(default=4, ge=1)
    head_dim: int = Field(default=8, ge=2)
    n_blocks: int = Field(default=2, ge=1)
    expert_hidden: int = Field(default=64, ge=1)
    audio_encoder_blocks: int = Field(default=1, ge=0)
    rope_base: float = Field(default=10_000.0, gt=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_dims(self) -> "DenoiserConfig":
        if self.model_dim != self.n_heads * self.head_dim:
            raise ValueError(
                f"model_dim ({self.model_dim}) must equal n_heads x head_dim "
                f"({self.n_heads} x {self.head_dim})"
            )
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary pairs")
        return self


class OrchestratorConfig(BaseModel):
    """Causal orchestrator (toy stand-in for the LLM)."""

    model_config = ConfigDict(protected_namespaces=())

    model_dim: int = Field(default=32, ge=2)
    n_heads: int = Field(default=4, ge=1)
    n_blocks: int = Field(default=2, ge=1)
    ffn_hidden: int = Field(default=64, ge=1)
    text_window: int = Field(default=24, ge=1, description="Upcoming transcript tokens visible")
    history_cap_s: float = Field(default=15.0, gt=0)
    ref_audio_frames: int = Field(default=12, ge=1)
    rope_base: float = Field(default=10_000.0, gt=1)
    seed: int = Field(default=1, ge=0)

    @model_validator(mode="after")
    def _check_dims(self) -> "OrchestratorConfig":
        if self.model_dim % self.n_heads:
            raise ValueError("orchestrator model_dim must be divisible by n_heads")
        if (self.model_dim // self.n_heads) % 2:
            raise ValueError("orchestrator head dim must be even for rotary pairs")
        return self


class PointerConfig(BaseModel):
    """Progress-aware pointer head."""

    key_dim: int = Field(default=16, ge=1)
    offset_hidden: int = Field(default=16, ge=1)
    beta: float = Field(default=1.0, gt=0, description="Smooth l1 transition point")
    seed: int = Field(default=2, ge=0)


class TrainConfig(BaseModel):
    """Desk-scale joint pretraining of orchestrator + denoiser + pointer."""

    steps: int = Field(default=2000, ge=0)
    orchestrator_warmup_steps: int = Field(default=100, ge=0)
    batch_size: int = Field(default=4, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    pap_loss_weight: float = Field(default=1.0, ge=0)
    context_prob: float = Field(default=0.5, ge=0, le=1)
    sample_tokens: tuple[int, int] = Field(default=(24, 48))
    teacher_steps: int = Field(default=50, ge=1)
    checkpoint_every: int = Field(default=500, ge=1)
    log_every: int = Field(default=50, ge=1)

    @field_validator("sample_tokens")
    @classmethod
    def _check_tokens(cls, v: tuple[int, int]) -> tuple[int, int]:
        if v[0] < 1 or v[1] < v[0]:
            raise ValueError(f"sample_tokens must satisfy 1 <= min <= max, got {v}")
        return v


class DistillConfig(BaseModel):
    """Two-stage decoupled distillation."""

    stage1_steps: int = Field(default=600, ge=0)
    stage2_steps: int = Field(default=400, ge=0)
    student_lr: float = Field(default=2e-6, gt=0)
    fake_score_lr: float = Field(default=4e-7, gt=0)
    student_steps: int = Field(default=4, ge=1)
    student_schedule: list[float] = Field(default_factory=lambda: [1.0, 0.75, 0.5, 0.25])
    teacher_steps: int = Field(default=50, ge=1)
    parity_samples: int = Field(default=512, ge=1)
    parity_tolerance: float = Field(default=0.15, gt=0)
    rollout_chunks: int = Field(default=5, ge=2)
    loss_window: int = Field(default=3, ge=1)
    sink: bool = Field(default=True)
    skip_stage1: bool = Field(default=False)
    batch_size: int = Field(default=2, ge=1)
    renoise_range: tuple[float, float] = Field(default=(0.02, 0.98))
    log_every: int = Field(default=25, ge=1)

    @model_validator(mode="after")
    def _check_distill(self) -> "DistillConfig":
        if self.loss_window > self.rollout_chunks:
            raise ValueError(
                f"loss_window ({self.loss_window}) cannot exceed rollout_chunks "
                f"({self.rollout_chunks})"
            )
        if len(self.student_schedule) != self.student_steps:
            raise ValueError(
                f"student_schedule has {len(self.student_schedule)} entries, "
                f"expected student_steps={self.student_steps}"
            )
        lo, hi = self.renoise_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"renoise_range must satisfy 0 <= lo < hi <= 1, got {self.renoise_range}")
        return self


class StreamConfig(BaseModel):
    """Streaming inference and long-horizon evaluation."""

    n_chunks: int = Field(default=20, ge=0)
    transcript_tokens: int = Field(default=200, ge=0)
    overlap: bool = Field(default=True)
    sink: bool = Field(default=True)
    segment_s: float = Field(default=30.0, gt=0)
    probe_s: float = Field(default=5.0, gt=0)
    reference_samples: int = Field(default=1000, ge=1)


class RunConfig(BaseModel):
    """Complete, versioned experiment configuration."""

    version: Literal[1] = CONFIG_VERSION
    seed: int = Field(default=0, ge=0)
    world: WorldConfig = Field(default_factory=WorldConfig)
    geometry: ChunkGeometry = Field(default_factory=ChunkGeometry)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    orchestrator: OrchestratorConfig = Field(default_factory=OrchestratorConfig)
    pointer: PointerConfig = Field(default_factory=PointerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    stream: StreamConfig = Field(default_factory=StreamConfig)
    output_dir: Path = Field(default=Path("runs/default"))

    @model_validator(mode="after")
    def _check_geometry(self) -> "RunConfig":
        if self.geometry.audio_per_video != self.world.audio_per_video:
            raise ValueError(
                f"chunk geometry uses {self.geometry.audio_per_video} audio frames per video "
                f"frame but the world rates imply {self.world.audio_per_video}"
            )
        return self

    @property
    def history_cap_frames(self) -> int:
        """History budget in audio latent frames (15 s x 24 = 360)."""
        return int(self.orchestrator.history_cap_s * self.world.latent_audio_rate)

    def to_yaml(self) -> str:
        """Serialize to versioned YAML."""
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        """Parse a YAML document produced by :meth:`to_yaml` (or written by hand)."""
        data = yaml.safe_load(text) or {}
        version = data.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"Unsupported config version {version} (expected {CONFIG_VERSION})")
        return cls.model_validate(data)

    @classmethod
    def load(cls, path: Optional[Path]) -> "RunConfig":
        """Load from a YAML file, or return defaults when path is None."""
        if path is None:
            return cls()
        if not path.exists():
            raise FileNotFoundError(f"Run config not found: {path}")
        return cls.from_yaml(path.read_text(encoding="utf-8"))

    def save(self, path: Path) -> None:
        """Write the YAML document to path."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Process settings
# ---------------------------------------------------------------------------


class Settings(BaseSettings):
    """Process-level settings."""

    config_path: Path = Field(default=Path("configs"))
    output_root: Path = Field(default=Path("runs"))
    log_level: str = Field(default="INFO")
    log_json: bool = Field(default=False)

    model_config = SettingsConfigDict(
        env_prefix="AVS_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        """Insert the config.yml source below env vars and .env."""
        config_path = Path(os.getenv("AVS_CONFIG_PATH", "configs"))
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            YamlSettingsSource(settings_cls, config_path / "config.yml"),
            file_secret_settings,
        )

    @field_validator("config_path", "output_root", mode="before")
    @classmethod
    def _as_path(cls, v: str | Path) -> Path:
        return Path(v) if isinstance(v, str) else v

    def resolve_output(self, run: RunConfig) -> Path:
        """Absolute-or-root-relative run directory."""
        if run.output_dir.is_absolute():
            return run.output_dir
        return self.output_root / run.output_dir

    def get_log_path(self, run: RunConfig) -> Path:
        """Logs directory of a run."""
        return self.resolve_output(run) / "logs"


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


def log_run_config(run: RunConfig, settings: Optional[Settings] = None) -> None:
    """Log the resolved run configuration."""
    logger.info("=" * 60)
    logger.info("AVSTREAM - RUN CONFIGURATION")
    logger.info("=" * 60)
    if settings is not None:
        logger.info("[Paths]")
        logger.info(f"  Config path: {settings.config_path}")
        logger.info(f"  Output root: {settings.output_root}")
        logger.info(f"  Run dir:     {settings.resolve_output(run)}")

    w = run.world
    logger.info("[World]")
    logger.info(f"  Vocab:        {w.vocab_size} tokens, {w.n_characters} characters")
    logger.info(f"  Video:        {w.video_channels}ch x {w.video_spatial} @ {w.latent_video_fps} fps")
    logger.info(f"  Audio:        {w.audio_channels}ch @ {w.latent_audio_rate} Hz")
    logger.info(f"  Seed:         {w.seed}")

    g = run.geometry
    logger.info("[Chunk]")
    logger.info(f"  Latent frames: {g.video_frames} video / {g.audio_frames} audio")
    logger.info(f"  Motion frames: {g.motion_frames}")
    logger.info(f"  Budget:        {g.budget_s:.3f} s ({g.pixel_frames} frames)")

    d = run.denoiser
    logger.info("[Denoiser]")
    logger.info(f"  Dim x heads:  {d.model_dim} x {d.n_heads}, {d.n_blocks} blocks")

    o = run.orchestrator
    logger.info("[Orchestrator]")
    logger.info(f"  Dim x heads:  {o.model_dim} x {o.n_heads}, {o.n_blocks} blocks")
    logger.info(f"  History cap:  {o.history_cap_s} s ({run.history_cap_frames} frames)")

    ds = run.distill
    logger.info("[Distill]")
    logger.info(f"  Steps:        {ds.stage1_steps} + {ds.stage2_steps}")
    logger.info(f"  LR:           student {ds.student_lr:g} / fake {ds.fake_score_lr:g}")
    logger.info(f"  Rollout:      K={ds.rollout_chunks}, window={ds.loss_window}, sink={ds.sink}")
