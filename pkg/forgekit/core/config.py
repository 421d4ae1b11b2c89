import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

from pydantic import ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from forgekit.core.errors import ConfigError

ARCHITECTURE_SECTIONS = ("model", "encoder", "pose", "pairwise", "fusion", "volume")


def _section_config(name: str) -> SettingsConfigDict:
    return SettingsConfigDict(env_prefix=f"FORGEKIT_{name.upper()}_", extra="forbid")


class RunSettings(BaseSettings):
    model_config = _section_config("run")

    seed: int = 0


class ModelSettings(BaseSettings):
    model_config = _section_config("model")

    image_size: int = 32
    views: int = 5  # k input views per episode
    split_n: int = 2  # views used to build the volume in L_corr


class EncoderSettings(BaseSettings):
    model_config = _section_config("encoder")

    stride: int = 2
    width: int = 32
    blocks: int = 1
    depth_bins: int = 16  # d
    channels_2d: int = 128  # C, divisible by d
    voxel_channels: int = 16  # c
    unet_refine: bool = False

    @field_validator("stride")
    @classmethod
    def _check_stride(cls, value: int) -> int:
        if value not in (2, 4, 8):
            raise ValueError("encoder stride must be 2, 4 or 8")
        return value


class PoseSettings(BaseSettings):
    model_config = _section_config("pose")

    extractors: Literal["global", "pairwise", "both"] = "both"
    token_stride: int = 4
    token_channels: int = 64
    heads: int = 4
    gpr_blocks: int = 3
    joint_reasoning: bool = True
    feature_dim: int = 128
    hidden_dim: int = 256
    dropout: float = 0.6


class PairwiseSettings(BaseSettings):
    model_config = _section_config("pairwise")

    channels: int = 16
    pe_channels: int = 24
    heads: int = 4
    normalize: Literal["softmax", "none"] = "softmax"
    values: Literal["pe", "features"] = "pe"


class FusionSettings(BaseSettings):
    model_config = _section_config("fusion")

    mode: Literal["avg", "seq", "both"] = "both"
    kernel_size: int = 3


class VolumeSettings(BaseSettings):
    model_config = _section_config("volume")

    extent: float = 1.0
    feature_channels: int = 8  # F
    hidden_channels: int = 16
    canonical_distance: float = 1.5


class RenderSettings(BaseSettings):
    model_config = _section_config("render")

    n_samples: int = 32


class LossSettings(BaseSettings):
    model_config = _section_config("loss")

    lambda_img: float = 5.0
    lambda_p: float = 0.02
    lambda_pose: float = 1.0
    perceptual_enabled: bool = False
    ccl_enabled: bool = True


class TrainSettings(BaseSettings):
    model_config = _section_config("train")

    batch_size: int = 4
    stage1_iterations: int = 2000
    stage1_lr: float = 1e-3
    stage1_milestones: List[int] = [750, 1500]
    stage2_iterations: int = 5000
    stage2_lr: float = 1e-3
    stage2_milestones: List[int] = [2000, 3000, 4000]
    stage3_iterations: int = 1000
    stage3_lr: float = 2.5e-4
    stage3_milestones: List[int] = [400, 800]
    stage3_dropout: bool = True
    random_canonical: bool = True
    log_every: int = 50
    checkpoint_every: int = 500
    val_scenes: int = 2

    @field_validator("stage1_milestones", "stage2_milestones", "stage3_milestones", mode="before")
    @classmethod
    def _split_milestones(cls, value):
        if isinstance(value, str):
            return [int(item) for item in value.replace(" ", "").split(",") if item]
        return value


class DatagenSettings(BaseSettings):
    model_config = _section_config("datagen")

    scenes: int = 5
    resolution: int = 32
    focal_factor: float = 1.25
    min_distance: float = 1.4
    max_distance: float = 1.6
    max_primitives: int = 4
    fit_radius: float = 0.45
    supersample: int = 1
    workers: int = 1


class EvalSettings(BaseSettings):
    model_config = _section_config("eval")

    variant: Literal["forge-star", "forge-dagger", "forge"] = "forge-star"
    tto_iters: int = 100
    tto_lr: float = 2e-3
    voxel_threshold: float = 5.0
    voxel_resolution: int = 32


class AblateSettings(BaseSettings):
    model_config = _section_config("ablate")

    stage1_iterations: int = 200
    stage2_iterations: int = 300


class LoggingSettings(BaseSettings):
    model_config = _section_config("logging")

    level: str = "INFO"
    log_file: Optional[str] = None


class PathsSettings(BaseSettings):
    model_config = _section_config("paths")

    dataset: str = "data/toy"
    run_dir: str = "runs/toy"


SECTION_TYPES: Dict[str, type[BaseSettings]] = {
    "run": RunSettings,
    "model": ModelSettings,
    "encoder": EncoderSettings,
    "pose": PoseSettings,
    "pairwise": PairwiseSettings,
    "fusion": FusionSettings,
    "volume": VolumeSettings,
    "render": RenderSettings,
    "loss": LossSettings,
    "train": TrainSettings,
    "datagen": DatagenSettings,
    "eval": EvalSettings,
    "ablate": AblateSettings,
    "logging": LoggingSettings,
    "paths": PathsSettings,
}


class RunConfig(BaseSettings):
    """
    Fully resolved run configuration.

    Layering: field defaults < FORGEKIT_* environment < config file <
    command-line overrides.
    """

    model_config = SettingsConfigDict(env_prefix="FORGEKIT_", extra="forbid")

    seed: int = 0
    model: ModelSettings = ModelSettings()
    encoder: EncoderSettings = EncoderSettings()
    pose: PoseSettings = PoseSettings()
    pairwise: PairwiseSettings = PairwiseSettings()
    fusion: FusionSettings = FusionSettings()
    volume: VolumeSettings = VolumeSettings()
    render: RenderSettings = RenderSettings()
    loss: LossSettings = LossSettings()
    train: TrainSettings = TrainSettings()
    datagen: DatagenSettings = DatagenSettings()
    eval: EvalSettings = EvalSettings()
    ablate: AblateSettings = AblateSettings()
    logging: LoggingSettings = LoggingSettings()
    paths: PathsSettings = PathsSettings()

    @classmethod
    def from_layers(
        cls,
        file_values: Optional[Dict[str, Dict[str, object]]] = None,
        overrides: Optional[Dict[str, Dict[str, object]]] = None,
    ) -> "RunConfig":
        """Build a config from parsed file sections and dotted overrides."""
        merged: Dict[str, Dict[str, object]] = {}
        for layer in (file_values or {}, overrides or {}):
            for section, fields in layer.items():
                merged.setdefault(section, {}).update(fields)

        unknown = [section for section in merged if section not in SECTION_TYPES]
        if unknown:
            raise ConfigError(f"Unknown config sections: {', '.join(sorted(unknown))}")

        try:
            sections = {
                name: section_type(**merged.get(name, {}))
                for name, section_type in SECTION_TYPES.items()
            }
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

        run_section = sections.pop("run")
        seed_kwargs = {"seed": run_section.seed} if "seed" in merged.get("run", {}) else {}
        config = cls(**seed_kwargs, **sections)
        config.check_consistency()
        return config

    @classmethod
    def from_config_file(
        cls,
        config_file: Optional[str] = None,
        overrides: Optional[Sequence[str]] = None,
    ) -> "RunConfig":
        from forgekit.core.config_manager import parse_overrides, read_config_file

        file_values = read_config_file(config_file)
        return cls.from_layers(file_values, parse_overrides(overrides or []))

    def check_consistency(self) -> None:
        """Cross-section rules that single-field validation cannot express."""
        errors = []
        grid = self.model.image_size // self.encoder.stride
        if self.model.image_size % self.encoder.stride:
            errors.append("model.image_size must be divisible by encoder.stride")
        if self.encoder.channels_2d % self.encoder.depth_bins:
            errors.append("encoder.channels_2d must be divisible by encoder.depth_bins")
        if self.encoder.depth_bins != grid:
            errors.append(
                f"encoder.depth_bins ({self.encoder.depth_bins}) must equal the "
                f"2D feature size image_size/stride ({grid})"
            )
        if self.model.image_size % self.pose.token_stride:
            errors.append("model.image_size must be divisible by pose.token_stride")
        if self.pairwise.pe_channels % 6:
            errors.append("pairwise.pe_channels must be divisible by 6")
        if self.pairwise.pe_channels % self.pairwise.heads:
            errors.append("pairwise.pe_channels must be divisible by pairwise.heads")
        if self.pose.token_channels % self.pose.heads:
            errors.append("pose.token_channels must be divisible by pose.heads")
        if grid % 2:
            errors.append("the voxel grid size must be even")
        if not 1 <= self.model.split_n < self.model.views:
            errors.append("model.split_n must satisfy 1 <= split_n < views")
        if self.render.n_samples < 2:
            errors.append("render.n_samples must be at least 2")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def grid_size(self) -> int:
        return self.model.image_size // self.encoder.stride

    @property
    def volume_size(self) -> int:
        return 2 * self.grid_size

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def model_hash(self) -> str:
        dump = self.model_dump(mode="json")
        payload = json.dumps({name: dump[name] for name in ARCHITECTURE_SECTIONS}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: Dict[str, Dict[str, object]]) -> "RunConfig":
        """Return a copy with some section fields replaced."""
        dump = self.model_dump(mode="json")
        layered: Dict[str, Dict[str, object]] = {
            section: {key: value for key, value in fields.items()}
            for section, fields in dump.items()
            if isinstance(fields, dict)
        }
        layered["run"] = {"seed": dump["seed"]}
        for section, fields in overrides.items():
            layered.setdefault(section, {}).update(fields)
        return RunConfig.from_layers(layered)


def default_config_path() -> Path:
    return Path(__file__).resolve().parent / "forgekit.cfg"
