"""Dataclass configs for the desk-scale and full-shape setups, plus JSON I/O.

The JSON schema mirrors the dataclass fields one-to-one (tuples stored as
lists). `save_train_config` / `load_train_config` round-trip a TrainConfig.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear variance schedule: `steps` betas from beta_start to beta_end."""

    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


@dataclass(frozen=True)
class ModelConfig:
    """Shared shape parameters for conditioners, fusion and the denoiser."""

    resolution: int = 32
    channels: int = 3
    token_dim: int = 64
    head_count: int = 4
    num_landmarks: int = 20
    trunk_width: int = 32
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    attn_resolutions: tuple[int, ...] = (16, 8)
    time_embed_dim: int = 128
    eval_feature_dim: int = 64

    def __post_init__(self):
        if self.token_dim % self.head_count != 0:
            raise ValueError("head_count must divide token_dim")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective.

    `lam` scales the identity-consistency term, `gamma` the landmark term and
    `sigma` the whole second (cycle) pass. All must be nonnegative.
    """

    lam: float = 0.05
    gamma: float = 0.1
    sigma: float = 0.5

    def __post_init__(self):
        if min(self.lam, self.gamma, self.sigma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class AblationFlags:
    """Component toggles: landmark conditioning/loss, cross-fusion, cycle pass."""

    landmarks: bool = True
    cross_fusion: bool = True
    cycle: bool = True


@dataclass
class TrainConfig:
    data_root: str = ""
    run_dir: str = ""
    conditioners: str | None = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    steps: int = 200
    seed: int = 0
    afid_interval: int = 0
    afid_pairing_seed: int = 0
    checkpoint_interval: int = 0
    eval_batch: int = 16
    clamp_recovered: bool = False
    stop_grad_cycle: bool = False


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: 32x32 images, 64-dim tokens, 100-step schedule."""
    cfg = TrainConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def paper_shape_model() -> ModelConfig:
    """Full-shape dimensions: 112x112 inputs, 512-dim tokens, 8 heads, 68 points."""
    return ModelConfig(
        resolution=112,
        token_dim=512,
        head_count=8,
        num_landmarks=68,
        trunk_width=64,
        base_channels=64,
        channel_mults=(1, 2, 2, 4),
        attn_resolutions=(28, 14),
        time_embed_dim=512,
        eval_feature_dim=128,
    )


def paper_shape_schedule() -> ScheduleConfig:
    return ScheduleConfig(steps=1000)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(v) for v in obj]
    return obj


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return _to_jsonable(cfg)


def train_config_from_dict(d: dict) -> TrainConfig:
    def build(cls, sub):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in sub:
                continue
            v = sub[f.name]
            if f.name in _NESTED:
                v = build(_NESTED[f.name], v)
            elif isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
        return cls(**kwargs)

    _NESTED = {
        "schedule": ScheduleConfig,
        "model": ModelConfig,
        "weights": LossWeights,
        "flags": AblationFlags,
    }
    return build(TrainConfig, d)


def save_train_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(train_config_to_dict(cfg), indent=2) + "\n")


def load_train_config(path: str | Path) -> TrainConfig:
    return train_config_from_dict(json.loads(Path(path).read_text()))
