"""Model, training and loss-weight configuration, with strict JSON parsing."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: list[int] = field(default_factory=lambda: [16, 16])
    channels: int = 1
    n_classes: int = 2
    concept_dim: int = 4
    residual_dim: int = 8
    capsule_conv_channels: int = 32
    primary_types: int = 8
    primary_dim: int = 8
    routing_iterations: int = 3
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32])
    generator_channels: list[int] = field(default_factory=lambda: [32, 16])
    critic_channels: list[int] = field(default_factory=lambda: [16, 32])
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        if self.concept_dim < 2 or self.residual_dim < 1:
            raise ConfigError("model: concept_dim must be >= 2 and residual_dim >= 1")
        if self.n_classes < 2:
            raise ConfigError("model.n_classes must be >= 2")
        if h % 4 or w % 4 or h < 12 or w < 12:
            raise ConfigError("model.image_size must be multiples of 4, at least 12")
        if self.routing_iterations < 1:
            raise ConfigError("model.routing_iterations must be >= 1")
        for key in ("encoder_channels", "generator_channels", "critic_channels"):
            if len(getattr(self, key)) != 2:
                raise ConfigError(f"model.{key} must list two widths")


@dataclass
class LossWeights:
    margin: float = 1.0
    recon: float = 0.5
    cg: float = 1.0
    cs: float = 0.1
    rs: float = 0.1
    concept: float = 0.1
    cr: float = 0.5
    g: float = 1.0
    dg: float = 1.0
    lgp: float = 10.0
    kl: float = 0.01

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"weights.{f.name} must be finite and >= 0, got {v}")


GROUPS = ("cc", "e", "dg", "g", "dcr")
CG_LOSS_FORMS = ("signed", "xent")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: dict[str, float] = field(default_factory=lambda: {g: 2e-4 for g in GROUPS})
    betas_classifier: list[float] = field(default_factory=lambda: [0.9, 0.999])
    betas_adversarial: list[float] = field(default_factory=lambda: [0.5, 0.9])
    seed: int = 0
    checkpoint_interval: int = 5
    critic_steps: int = 1
    cg_loss: str = "signed"  # "signed" logit dot products or "xent" softmax cross-entropy

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("train: epochs must be >= 1 and batch_size an even number >= 2")
        if set(self.lr) != set(GROUPS):
            raise ConfigError(f"train.lr must have exactly the keys {list(GROUPS)}")
        for g, v in self.lr.items():
            if not v > 0:
                raise ConfigError(f"train.lr.{g} must be > 0")
        if self.critic_steps < 1 or self.checkpoint_interval < 1:
            raise ConfigError("train: critic_steps and checkpoint_interval must be >= 1")
        if self.cg_loss not in CG_LOSS_FORMS:
            raise ConfigError(f"train.cg_loss must be one of {list(CG_LOSS_FORMS)}")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "Config":
        self.model.validate()
        self.train.validate()
        self.weights.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        sections = {"model": ModelConfig, "train": TrainConfig, "weights": LossWeights}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
        built = {name: _build(kind, data.get(name, {}), name) for name, kind in sections.items()}
        return cls(**built).validate()


def _check_type(value, default, path: str):
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and len(value) == len(default)
        if ok:
            value = [_check_type(v, default[0], f"{path}[{i}]") for i, v in enumerate(value)]
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
        if ok:
            merged = dict(default)
            for k, v in value.items():
                if k not in default:
                    raise ConfigError(f"unknown config key: {path}.{k}")
                merged[k] = _check_type(v, default[k], f"{path}.{k}")
            value = merged
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(kind, data, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected object")
    defaults = kind()
    names = {f.name for f in dataclasses.fields(kind)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key: {section}.{key}")
    values = {
        key: _check_type(value, getattr(defaults, key), f"{section}.{key}")
        for key, value in data.items()
    }
    return kind(**values)


def parse_config(path) -> tuple[ModelConfig, TrainConfig, LossWeights]:
    """Read a JSON config; absent keys take defaults, unknown keys are rejected."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = Config.from_dict(data)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg.model, cfg.train, cfg.weights
