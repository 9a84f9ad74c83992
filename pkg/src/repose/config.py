"""Run configuration: one YAML file holds every pipeline threshold and path.

Flags override file values; defaults below are the documented baseline. The
seed is recorded into every machine-readable output artifact.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import CurationConfig


@dataclass
class PathsConfig:
    frames_dir: str = "data/frames"
    poses_dir: str = "data/poses"
    out_dir: str = "out"

    @property
    def manifest_path(self) -> Path:
        return Path(self.out_dir) / "manifest.jsonl"

    @property
    def assets_dir(self) -> Path:
        return Path(self.out_dir) / "assets"

    @property
    def captions_path(self) -> Path:
        return Path(self.out_dir) / "captions.jsonl"

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.out_dir) / "checkpoints"

    @property
    def loss_log_path(self) -> Path:
        return Path(self.out_dir) / "loss_log.csv"

    @property
    def stats_path(self) -> Path:
        return Path(self.out_dir) / "dataset_stats.json"

    @property
    def report_path(self) -> Path:
        return Path(self.out_dir) / "metric_report.json"


@dataclass
class CaptionConfig:
    prompt_template: str | None = None  # None selects the built-in template
    fewshot_count: int = 10
    retries: int = 3
    backoff_base: float = 0.5
    max_in_flight: int = 4


@dataclass
class ConditioningRunConfig:
    dual_pose: bool = False
    image_encoder: str = "hashed"
    text_encoder: str = "hashed"
    encoder_seed: int = 0
    projection_seed: int = 0


@dataclass
class DiffusionRunConfig:
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_width: int = 48
    channel_mults: tuple[int, ...] = (1, 2)
    attn_dim: int | None = None
    learning_rate: float = 2e-3
    lr_schedule: str = "cosine"
    batch_size: int = 2
    epochs: int = 200
    cond_dropout: float = 0.1
    guidance_weight: float = 3.0
    checkpoint_every: int = 50
    sample_steps: int | None = None  # None means the full timestep chain


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "c4"
    paths: PathsConfig = field(default_factory=PathsConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    conditioning: ConditioningRunConfig = field(default_factory=ConditioningRunConfig)
    diffusion: DiffusionRunConfig = field(default_factory=DiffusionRunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "paths": PathsConfig,
    "curation": CurationConfig,
    "caption": CaptionConfig,
    "conditioning": ConditioningRunConfig,
    "diffusion": DiffusionRunConfig,
}


def _build_section(section_cls, data: dict):
    known = {f.name for f in dataclasses.fields(section_cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {section_cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    if section_cls is DiffusionRunConfig and "channel_mults" in kwargs:
        kwargs["channel_mults"] = tuple(kwargs["channel_mults"])
    return section_cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    config = RunConfig()
    for key, value in data.items():
        if key in _SECTIONS:
            setattr(config, key, _build_section(_SECTIONS[key], value or {}))
        elif key in ("seed", "variant"):
            setattr(config, key, value)
        else:
            raise ValueError(f"unknown config key: {key}")
    return config


def load_config(path: str | Path | None) -> RunConfig:
    """Read the YAML config; a missing path gives pure defaults."""
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config root must be a mapping, got {type(data).__name__}")
    return config_from_dict(data)
