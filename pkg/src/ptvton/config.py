"""Pipeline configuration: dataclass sections addressed by flat dotted keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .network import ArchConfig
from .pose import DEFAULT_SIGMAS
from .texture import DEFAULT_LABELS, LabelSet


@dataclass
class OKSConfig:
    sigmas: list = field(default_factory=lambda: DEFAULT_SIGMAS.tolist())
    scale_floor: float = 1.0


@dataclass
class HeatmapConfig:
    sigma_px: float = 6.0


@dataclass
class WarpConfig:
    fill: float = 0.0
    regularization: float = 0.0


@dataclass
class CompositeConfig:
    radius: int = 4


@dataclass
class TrainConfig:
    lr_initial: float = 0.002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9999
    alpha: float = 0.5
    rho: float = 0.5
    l1_weight: float = 1.0
    perceptual_weight: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.0
    epochs_general: int = 200
    epochs_specialized: int = 20
    epochs_texture: int = 20
    batch_size: int = 8
    decay_schedule: str = "linear_after_half"
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise ValueError("train.lr_initial must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 <= b < 1:
                raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs_general < 0 or self.epochs_specialized < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.decay_schedule not in ("linear_after_half", "constant"):
            raise ValueError(f"unknown decay schedule {self.decay_schedule!r}")


@dataclass
class ModelConfig:
    base_channels: int = 64
    n_blocks: int = 9
    disc_channels: int = 64
    disc_layers: int = 4
    stem_kernel: int = 7
    texture_channels: int = 32

    def arch(self) -> ArchConfig:
        return ArchConfig(self.base_channels, self.n_blocks, self.disc_channels, self.disc_layers,
                          self.stem_kernel)


@dataclass
class SegConfig:
    labelmap: dict = field(default_factory=lambda: dict(DEFAULT_LABELS))
    garment_labels: list = field(default_factory=lambda: ["upper_clothes"])

    def label_set(self) -> LabelSet:
        return LabelSet(dict(self.labelmap), tuple(self.garment_labels))


@dataclass
class TransferConfig:
    occlusion_threshold: float = 0.05
    oks_floor: float = 0.1


@dataclass
class MetricsConfig:
    classifier: str = "inception_v3"
    is_splits: int = 1


@dataclass
class DataConfig:
    specialized_groups: int = 100


SECTIONS = {
    "oks": OKSConfig,
    "heatmap": HeatmapConfig,
    "warp": WarpConfig,
    "composite": CompositeConfig,
    "train": TrainConfig,
    "model": ModelConfig,
    "seg": SegConfig,
    "transfer": TransferConfig,
    "metrics": MetricsConfig,
    "data": DataConfig,
}


@dataclass
class PipelineConfig:
    oks: OKSConfig = field(default_factory=OKSConfig)
    heatmap: HeatmapConfig = field(default_factory=HeatmapConfig)
    warp: WarpConfig = field(default_factory=WarpConfig)
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "PipelineConfig":
        per_section: dict[str, dict] = {name: {} for name in SECTIONS}
        for key, val in flat.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise KeyError(f"unknown config key {key!r}")
            known = {f.name for f in dataclasses.fields(SECTIONS[section])}
            if name not in known:
                raise KeyError(f"unknown config key {key!r}")
            per_section[section][name] = val
        return cls(**{s: SECTIONS[s](**kw) for s, kw in per_section.items()})

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for section in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        return out

    def with_overrides(self, overrides: dict[str, Any]) -> "PipelineConfig":
        merged = self.to_flat()
        merged.update(overrides)
        return PipelineConfig.from_flat(merged)

    def digest(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a flat key/value YAML or JSON file; absent path gives defaults."""
    if path is None:
        return PipelineConfig()
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a flat mapping of dotted keys")
    return PipelineConfig.from_flat(data)


def toy_config(overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Narrow network and short schedules for desk-scale runs and tests."""
    base = {
        "model.base_channels": 8, "model.n_blocks": 9, "model.disc_channels": 8,
        "model.disc_layers": 3, "model.stem_kernel": 3, "model.texture_channels": 8,
        "train.batch_size": 8, "train.epochs_general": 30, "train.epochs_specialized": 5,
        "train.epochs_texture": 5, "metrics.classifier": "hue_histogram",
    }
    base.update(overrides or {})
    return PipelineConfig.from_flat(base)
