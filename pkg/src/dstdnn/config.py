"""Model and training configuration objects."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Architecture of a DS-TDNN variant.

    ``channels`` is the total base width C; each branch runs on C/2 channels.
    Per-layer lists (``res2_scales``, ``experts``, ``sparse_ratios``) hold one
    entry per block pair.
    """

    n_block_pairs: int = 3
    channels: int = 64
    res2_scales: list[int] = field(default_factory=lambda: [4, 4, 4])
    experts: list[int] = field(default_factory=lambda: [4, 4, 8])
    sparse_ratios: list[float] = field(default_factory=lambda: [0.3, 0.1, 0.1])
    mfa_dim: int = 192
    embedding_dim: int = 192
    n_mels: int = 80
    stem_kernel: int = 7
    local_kernel: int = 3
    fusion_weights: tuple[float, float] = (0.8, 0.2)
    # frame count the learnable filters are sized for (2 s at a 10 ms hop)
    filter_frames: int = 200
    se_reduction: int = 16
    se_min_dim: int = 4

    def __post_init__(self) -> None:
        self.res2_scales = list(self.res2_scales)
        self.experts = list(self.experts)
        self.sparse_ratios = [float(r) for r in self.sparse_ratios]
        self.fusion_weights = tuple(float(w) for w in self.fusion_weights)
        self.validate()

    @property
    def branch_channels(self) -> int:
        return self.channels // 2

    @property
    def filter_bins(self) -> int:
        return self.filter_frames // 2 + 1

    def validate(self) -> None:
        if self.channels <= 0 or self.channels % 2:
            raise ConfigError(f"channels must be positive and even, got {self.channels}")
        n = self.n_block_pairs
        if n < 1:
            raise ConfigError("n_block_pairs must be >= 1")
        for name in ("res2_scales", "experts", "sparse_ratios"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} must have {n} entries")
        half = self.branch_channels
        for s in self.res2_scales:
            if s < 1 or half % s:
                raise ConfigError(f"branch width {half} not divisible by scale {s}")
        if any(k < 1 for k in self.experts):
            raise ConfigError("expert counts must be >= 1")
        if any(not 0.0 <= r <= 1.0 for r in self.sparse_ratios):
            raise ConfigError("sparse ratios must lie in [0, 1]")
        if len(self.fusion_weights) != 2:
            raise ConfigError("fusion_weights needs exactly two entries")
        if self.filter_frames < 2:
            raise ConfigError("filter_frames must be >= 2")
        if self.stem_kernel % 2 == 0 or self.local_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd for same-length padding")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["fusion_weights"] = list(self.fusion_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# Model sizes toy, S, B, L; C is the total width (both branches together).
PRESETS: dict[str, dict[str, Any]] = {
    "toy": dict(channels=64, res2_scales=[4, 4, 4], experts=[4, 4, 8],
                sparse_ratios=[0.3, 0.1, 0.1], mfa_dim=192),
    "S": dict(channels=512, res2_scales=[4, 4, 4], experts=[4, 4, 8],
              sparse_ratios=[0.3, 0.1, 0.1], mfa_dim=1536),
    "B": dict(channels=1024, res2_scales=[4, 4, 8], experts=[4, 8, 8],
              sparse_ratios=[0.3, 0.1, 0.1], mfa_dim=1536),
    "L": dict(channels=1536, res2_scales=[4, 8, 8], experts=[8, 8, 8],
              sparse_ratios=[0.4, 0.2, 0.2], mfa_dim=1536),
}


def preset(name: str, **overrides: Any) -> ModelConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    warmup_steps: int = 2000
    weight_decay: float = 2e-5
    crop_seconds: float = 2.0
    margin: float = 0.2
    scale: float = 30.0
    # random crops drawn from every utterance per epoch
    crops_per_utterance: int = 1
    spec_augment: bool = True
    # large-margin fine-tuning overrides, e.g. {"epochs": 5, "margin": 0.5, "crop_seconds": 6.0}
    fine_tune: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ConfigError("invalid epochs / batch_size / warmup_steps")
        if not 0 <= self.margin < 3.141592653589793 / 2:
            raise ConfigError("margin must lie in [0, pi/2)")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainSchedule":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)

    def fine_tune_stage(self) -> "TrainSchedule | None":
        if not self.fine_tune:
            return None
        d = self.to_dict()
        d["warmup_steps"] = 0
        d.update(self.fine_tune)
        d["fine_tune"] = None
        return TrainSchedule.from_dict(d)


def load_json(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with path.open() as fh:
        return json.load(fh)
