"""Run configuration: one dataclass per config-file section.

The run config is a YAML file with top-level sections ``data``, ``model``,
``losses``, ``training`` and ``eval`` (plus an optional ``ablation`` list of
loss-section overrides).  Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError

CLASSIFICATION_TERMS = ("focal", "ce")
OVERLAP_TERMS = ("tversky", "focal_tversky", "dice")


def _pair(value, name):
    if isinstance(value, int):
        value = (value, value)
    try:
        a, b = value
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected an integer pair, got {value!r}") from None
    return (int(a), int(b))


def _check(cond, name, constraint, value):
    if not cond:
        raise ConfigError(f"{name}: must satisfy {constraint}, got {value!r}")


@dataclass
class DataConfig:
    mask_threshold: float = 0.5
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    clahe_enabled: bool = True
    clahe_clip_limit: float = 2.0
    clahe_tile_grid: tuple = (8, 8)
    random_crop_size: Optional[tuple] = None

    def __post_init__(self):
        self.clahe_tile_grid = _pair(self.clahe_tile_grid, "data.clahe_tile_grid")
        if self.random_crop_size is not None:
            self.random_crop_size = _pair(self.random_crop_size, "data.random_crop_size")
        _check(0.0 < self.mask_threshold < 1.0, "data.mask_threshold", "0 < t < 1", self.mask_threshold)
        for name in ("horizontal_flip_prob", "vertical_flip_prob"):
            v = getattr(self, name)
            _check(0.0 <= v <= 1.0, f"data.{name}", "0 <= p <= 1", v)
        _check(self.clahe_clip_limit > 0, "data.clahe_clip_limit", "> 0", self.clahe_clip_limit)
        _check(min(self.clahe_tile_grid) > 0, "data.clahe_tile_grid", "positive entries", self.clahe_tile_grid)


@dataclass
class ModelConfig:
    image_size: tuple = (256, 256)
    unet_depth: int = 4
    unet_width: int = 64
    latent_dim: int = 128
    style_dim: int = 128
    mapping_layers: int = 4
    disc_layers: int = 3  # stride-2 stages before the stride-1 stage
    disc_width: int = 64
    disc_attention: bool = True

    def __post_init__(self):
        self.image_size = _pair(self.image_size, "model.image_size")
        for name in ("unet_depth", "unet_width", "latent_dim", "style_dim", "mapping_layers", "disc_layers", "disc_width"):
            v = getattr(self, name)
            _check(isinstance(v, int) and v > 0, f"model.{name}", "positive integer", v)
        h, w = self.image_size
        k = 2 ** self.unet_depth
        _check(h % k == 0 and w % k == 0, "model.image_size", f"divisible by 2**unet_depth={k}", self.image_size)


@dataclass
class LossConfig:
    """Hyperparameters of every training objective.

    ``classification`` selects focal or plain cross-entropy; ``overlap`` selects
    Tversky, focal Tversky (exponent ``tversky_gamma``) or Dice.
    """

    alpha_t: float = 0.25
    gamma: float = 2.0
    tversky_alpha: float = 0.4
    tversky_beta: float = 0.6
    tversky_gamma: float = 0.75
    lambda1: float = 1.0
    lambda2: float = 1.0
    weight_perceptual: float = 10.0
    weight_l1: float = 100.0
    weight_adversarial: float = 1.0
    weight_cycle: float = 10.0
    weight_cycle_perceptual: float = 0.0
    smooth: float = 1.0
    classification: str = "focal"
    overlap: str = "tversky"
    perceptual_extractor: str = "fallback"
    label: Optional[str] = None

    def __post_init__(self):
        _check(0.0 <= self.alpha_t <= 1.0, "losses.alpha_t", "0 <= alpha_t <= 1", self.alpha_t)
        _check(self.gamma >= 0, "losses.gamma", ">= 0", self.gamma)
        _check(self.tversky_gamma > 0, "losses.tversky_gamma", "> 0", self.tversky_gamma)
        for name in ("tversky_alpha", "tversky_beta", "lambda1", "lambda2", "weight_perceptual", "weight_l1",
                     "weight_adversarial", "weight_cycle", "weight_cycle_perceptual"):
            v = getattr(self, name)
            _check(v >= 0, f"losses.{name}", ">= 0", v)
        _check(self.tversky_alpha + self.tversky_beta > 0, "losses.tversky_alpha",
               "tversky_alpha + tversky_beta > 0", (self.tversky_alpha, self.tversky_beta))
        _check(self.smooth > 0, "losses.smooth", "> 0", self.smooth)
        _check(self.classification in CLASSIFICATION_TERMS, "losses.classification",
               f"one of {CLASSIFICATION_TERMS}", self.classification)
        _check(self.overlap in OVERLAP_TERMS, "losses.overlap", f"one of {OVERLAP_TERMS}", self.overlap)

    def describe(self):
        """Table label such as ``Focal CE + TV(α=0.4, β=0.6)``."""
        if self.label:
            return self.label
        ce = "Focal CE" if self.classification == "focal" else "CE"
        if self.overlap == "dice":
            ov = "Dice"
        elif self.overlap == "tversky":
            ov = f"TV(α={self.tversky_alpha:g}, β={self.tversky_beta:g})"
        else:
            ov = f"Focal TV(α={self.tversky_alpha:g}, β={self.tversky_beta:g}, γ={self.tversky_gamma:g})"
        return f"{ce} + {ov}"


@dataclass
class TrainingConfig:
    epochs: int = 700
    learning_rate: float = 1e-4
    batch_size: int = 2
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 50
    device: str = "cpu"
    max_steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        _check(isinstance(self.epochs, int) and self.epochs >= 0, "training.epochs", "integer >= 0", self.epochs)
        _check(self.learning_rate > 0, "training.learning_rate", "> 0", self.learning_rate)
        _check(isinstance(self.batch_size, int) and self.batch_size > 0, "training.batch_size", "positive integer",
               self.batch_size)
        _check(0 <= self.beta1 < 1, "training.beta1", "0 <= beta1 < 1", self.beta1)
        _check(0 <= self.beta2 < 1, "training.beta2", "0 <= beta2 < 1", self.beta2)
        _check(self.adam_eps > 0, "training.adam_eps", "> 0", self.adam_eps)
        _check(isinstance(self.checkpoint_every, int) and self.checkpoint_every > 0, "training.checkpoint_every",
               "positive integer", self.checkpoint_every)
        if self.max_steps_per_epoch is not None:
            _check(self.max_steps_per_epoch > 0, "training.max_steps_per_epoch", "positive", self.max_steps_per_epoch)


@dataclass
class EvalConfig:
    extractor: str = "fallback"
    seed: int = 0
    ssim_window: int = 11

    def __post_init__(self):
        _check(self.ssim_window % 2 == 1 and self.ssim_window > 0, "eval.ssim_window", "odd positive integer",
               self.ssim_window)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: list = field(default_factory=list)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return _plain(d)

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> "RunConfig":
        raw = dict(raw or {})
        sections = {"data": DataConfig, "model": ModelConfig, "losses": LossConfig,
                    "training": TrainingConfig, "eval": EvalConfig}
        unknown = set(raw) - set(sections) - {"ablation"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {name: section_from_dict(klass, raw.get(name), name) for name, klass in sections.items()}
        ablation = raw.get("ablation") or []
        if not isinstance(ablation, list):
            raise ConfigError("ablation: must be a list of loss-section overrides")
        # validate entries eagerly; stored as plain dicts
        for i, entry in enumerate(ablation):
            ablation_loss_config(kwargs["losses"], entry, f"ablation[{i}]")
        return cls(ablation=[dict(e) for e in ablation], **kwargs)


def section_from_dict(klass, raw, section):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {sorted(unknown)}")
    try:
        return klass(**raw)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def ablation_loss_config(base: LossConfig, overrides: dict, where="ablation") -> LossConfig:
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected a mapping of loss fields")
    merged = {**dataclasses.asdict(base), "label": None, **overrides}
    return section_from_dict(LossConfig, merged, where)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return RunConfig.from_dict(raw)


def save_config(config: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False, allow_unicode=True))


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a new config with ``section.field`` overrides applied (flags beat the file)."""
    raw = config.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, name = dotted.partition(".")
        if section not in raw or not name:
            raise ConfigError(f"override {dotted!r}: expected section.field")
        raw[section][name] = value
    return RunConfig.from_dict(raw)
