"""Model and training configuration plus the ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class ModelConfig:
    vocab_size: int = 0
    d_embed: int = 64
    d_feat: int = 64
    d_hidden: int = 512
    depth: int = 6
    kernel: int = 3
    skip_every: int = 0
    hierarchical: bool = False
    image_size: int = 32          # 0: the model consumes precomputed feature grids
    enc_channels: tuple[int, int] = (16, 32)
    max_len: int = 70

    def validate(self) -> "ModelConfig":
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.kernel < 1:
            raise ConfigurationError("kernel must be >= 1")
        if self.skip_every < 0:
            raise ConfigurationError("skip_every must be >= 0")
        if min(self.d_embed, self.d_feat, self.d_hidden) < 1:
            raise ConfigurationError("layer widths must be positive")
        if self.image_size and self.image_size % 8:
            raise ConfigurationError(f"image_size {self.image_size} is not divisible by 8")
        if self.max_len < 1:
            raise ConfigurationError("max_len must be >= 1")
        return self

    @property
    def uses_encoder(self) -> bool:
        return self.image_size > 0


@dataclass
class TrainConfig:
    l2: float = 1e-5
    base_lr: float = 1e-3
    vision_lr_multiplier: float = 0.01
    decay_every: int = 50000
    decay_factor: float = 0.5
    batch_size: int = 10
    max_steps: int = 10000
    seed: int = 0
    init_stddev: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 500
    patience: int = 5
    target_loss: float = 0.0      # stop once validation per-token loss falls below this; 0 disables
    checkpoint: str = ""
    metrics_log: str = ""
    precision: str = "float32"

    def validate(self) -> "TrainConfig":
        if self.l2 < 0:
            raise ConfigurationError("l2 (lambda) must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError("decay_factor must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.decay_every < 1 or self.eval_every < 1:
            raise ConfigurationError("decay_every and eval_every must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be float32 or float64")
        return self


# vocab_size is derived from the vocabulary, never configured directly
MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "vocab_size"]
TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
CONFIG_KEYS = MODEL_KEYS + TRAIN_KEYS


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, tuple):
        return tuple(int(p) for p in raw.replace(",", " ").split())
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def apply_settings(model: ModelConfig, train: TrainConfig, settings: dict[str, str]) -> None:
    """Overwrite fields from string settings; unknown keys are rejected."""
    for key, raw in settings.items():
        target = model if key in MODEL_KEYS else train if key in TRAIN_KEYS else None
        if target is None:
            raise ConfigurationError(f"unknown config key {key!r}; accepted keys: {', '.join(CONFIG_KEYS)}")
        try:
            setattr(target, key, _parse_value(str(raw), getattr(target, key)))
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    settings = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        settings[key] = value
    return settings


def load_config_file(path, model: ModelConfig, train: TrainConfig) -> None:
    apply_settings(model, train, parse_config_text(Path(path).read_text(encoding="utf-8")))


def dump_config(model: ModelConfig, train: TrainConfig) -> str:
    lines = [f"{k} = {_format_value(getattr(model, k))}" for k in MODEL_KEYS]
    lines += [f"{k} = {_format_value(getattr(train, k))}" for k in TRAIN_KEYS]
    return "\n".join(lines) + "\n"


def configs_from_text(text: str, vocab_size: int = 0) -> tuple[ModelConfig, TrainConfig]:
    model, train = ModelConfig(vocab_size=vocab_size), TrainConfig()
    apply_settings(model, train, parse_config_text(text))
    return model, train


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
