"""Experiment configuration: one YAML file with arch/embedding/loss/data/trainer/eval sections.

Every field defaults to the published training setting where one exists.
Unknown keys are rejected and all violations are reported together.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from csd.trainer import Strategy, TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ArchConfig(_Section):
    base_width: int = Field(256, ge=4)
    n_blocks: int = Field(32, ge=1)
    scale: Literal[2, 3, 4] = 4
    res_scale: Optional[float] = Field(None, gt=0)


class EmbeddingConfig(_Section):
    kind: Literal["vgg19", "toy"] = "vgg19"
    weights: Optional[str] = None
    # None selects the extractor's own taps (conv 1, 3, 5, 9, 13 for VGG-19)
    layers: Optional[list[int]] = None
    layer_weights: Optional[list[float]] = None
    seed: int = 0

    @field_validator("layer_weights")
    @classmethod
    def _positive(cls, v):
        if v is not None and any(w <= 0 for w in v):
            raise ValueError("layer weights must be positive")
        return v


class LossConfig(_Section):
    kind: Literal["csd", "infonce", "perceptual", "none"] = "csd"
    lambda_t: float = Field(1.0, ge=0)
    lambda_c: float = Field(200.0, ge=0)
    epsilon: float = Field(1e-8, gt=0)
    temperature: float = Field(0.07, gt=0)


class NegativesConfig(_Section):
    k: int = Field(10, ge=1)
    shared: bool = False


class DataConfig(_Section):
    root: Optional[str] = None
    train_set: str = "div2k-train"
    val_set: Optional[str] = "div2k-val"
    patch: int = Field(192, ge=2)
    augment: bool = True
    negatives: NegativesConfig = Field(default_factory=NegativesConfig)
    # > 0 replaces the datasets with generated images (smoke runs, tests)
    synthetic: int = Field(0, ge=0)
    synthetic_size: int = Field(96, ge=8)


class TrainerConfig(_Section):
    width: float = Field(0.25, gt=0, le=1)
    batch_size: int = Field(16, ge=2)
    epochs: int = Field(300, ge=0)
    steps_per_epoch: int = Field(1000, ge=1)
    lr0: float = Field(1e-4, gt=0)
    decay_every: int = Field(200_000, ge=1)
    decay_factor: float = Field(0.1, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0
    teacher_init: str = "random"
    strategy: Strategy = Strategy.CSD
    val_every: int = Field(10, ge=1)
    val_images: int = Field(10, ge=1)
    out_dir: str = "runs/csd"


class EvalConfig(_Section):
    datasets: list[str] = Field(
        default_factory=lambda: ["set5", "set14", "bsd100", "urban100", "div2k-val"])
    widths: list[float] = Field(default_factory=lambda: [0.25, 1.0])
    ensemble: bool = False
    passes: int = Field(3, ge=3)
    warmup: int = Field(2, ge=0)
    out_dir: str = "results"

    @field_validator("widths")
    @classmethod
    def _widths(cls, v):
        if any(not 0 < r <= 1 for r in v):
            raise ValueError("widths must lie in (0, 1]")
        return v


class Config(_Section):
    arch: ArchConfig = Field(default_factory=ArchConfig)
    embedding: EmbeddingConfig = Field(default_factory=EmbeddingConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        t, lo, d = self.trainer, self.loss, self.data
        return TrainConfig(
            width=t.width, batch_size=t.batch_size, epochs=t.epochs,
            steps_per_epoch=t.steps_per_epoch, lr0=t.lr0, decay_every=t.decay_every,
            decay_factor=t.decay_factor, beta1=t.beta1, beta2=t.beta2, adam_eps=t.adam_eps,
            lambda_t=lo.lambda_t, lambda_c=lo.lambda_c, k=d.negatives.k, patch=d.patch,
            seed=t.seed, teacher_init=t.teacher_init, strategy=t.strategy, loss_kind=lo.kind,
            epsilon=lo.epsilon, temperature=lo.temperature,
            shared_negatives=d.negatives.shared, augment=d.augment,
            val_every=t.val_every, val_images=t.val_images)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _format_errors(exc: ValidationError):
    return [f"{'.'.join(map(str, e['loc'])) or '<root>'}: {e['msg']}" for e in exc.errors()]


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    problems = []
    for item in overrides or []:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"override {key!r}: {p} is not a section")
                break
        else:
            node[parts[-1]] = _parse_value(value)
    if problems:
        raise ConfigError(problems)
    return raw


def from_dict(raw: dict | None, overrides=None) -> Config:
    raw = dict(raw or {})
    raw = apply_overrides(raw, overrides)
    try:
        return Config.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def parse_config(path=None, overrides=None) -> Config:
    """Read and validate a YAML config; ``path=None`` gives pure defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
        if not isinstance(raw, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
    return from_dict(raw, overrides)


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
