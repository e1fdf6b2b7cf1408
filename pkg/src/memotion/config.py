"""Run configuration files.

Plain ``key = value`` lines grouped in four sections::

    [model]
    variant = multimodal
    hidden_dim = 64
    stack_channels = 8, 16, 32, 64, 64

    [optimizer]
    kind = lamb

    [training]
    phase1_lr = 5e-4
    patience = 30

    [data]
    pixel_mean = 0.5

Every key has a default (see :data:`KEYS`), so a file only lists what it
changes. Unknown sections or keys are rejected. Command-line overrides use
the ``section.key=value`` form.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fusion import HeadBankConfig, ModelConfig
from .image_encoder import ImageEncoderConfig
from .optim import OptimizerConfig
from .text_encoder import TextEncoderConfig
from .training import TrainConfig


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _ints(raw: str) -> list[int]:
    return [int(x) for x in raw.replace(",", " ").split()]


def _words(raw: str) -> tuple:
    return tuple(raw.replace(",", " ").split())


@dataclass
class DataConfig:
    pixel_mean: float = 0.5
    vocab_size: int = 1000
    synthetic_samples: int = 200


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.model.validate()
        self.training.optimizer = self.optimizer
        self.training.validate()
        if self.data.vocab_size < 5:
            raise ConfigError("data.vocab_size must be >= 5")
        return self


# section -> key -> (attribute path inside RunConfig, parser)
KEYS = {
    "model": {
        "variant": ("model.variant", str),
        "seed": ("model.seed", int),
        "vocab_size": ("model.text.vocab_size", int),
        "embed_dim": ("model.text.embed_dim", int),
        "hidden_dim": ("model.text.hidden_dim", int),
        "num_layers": ("model.text.num_layers", int),
        "num_heads": ("model.text.num_heads", int),
        "ff_dim": ("model.text.ff_dim", int),
        "max_seq_len": ("model.text.max_seq_len", int),
        "share_layers": ("model.text.share_layers", _bool),
        "factorized_embedding": ("model.text.factorized_embedding", _bool),
        "image_resolution": ("model.image.input_resolution", int),
        "stack_channels": ("model.image.stack_channels", _ints),
        "convs_per_stack": ("model.image.convs_per_stack", _ints),
        "head_hidden1": ("model.heads.hidden1", int),
        "head_hidden2": ("model.heads.hidden2", int),
        "head_dropout": ("model.heads.head_dropout", float),
        "feature_dropout": ("model.heads.feature_dropout", float),
    },
    "optimizer": {
        "kind": ("optimizer.kind", str),
        "warmup_fraction": ("optimizer.warmup_fraction", float),
        "weight_decay": ("optimizer.weight_decay", float),
        "epsilon": ("optimizer.epsilon", float),
        "beta1": ("optimizer.beta1", float),
        "beta2": ("optimizer.beta2", float),
        "decay_after_warmup": ("optimizer.decay_after_warmup", _bool),
    },
    "training": {
        "phase1_lr": ("training.phase1_lr", float),
        "phase2_lr": ("training.phase2_lr", float),
        "patience": ("training.patience", int),
        "batch_size": ("training.batch_size", int),
        "max_epochs_per_phase": ("training.max_epochs_per_phase", int),
        "validation_fraction": ("training.validation_fraction", float),
        "seed": ("training.seed", int),
        "phases": ("training.phases", _words),
    },
    "data": {
        "pixel_mean": ("data.pixel_mean", float),
        "vocab_size": ("data.vocab_size", int),
        "synthetic_samples": ("data.synthetic_samples", int),
    },
}


def _resolve(cfg: RunConfig, path: str):
    *parents, leaf = path.split(".")
    obj = cfg
    for p in parents:
        obj = getattr(obj, p)
    return obj, leaf


def set_value(cfg: RunConfig, section: str, key: str, raw: str, origin: str = "override"):
    if section not in KEYS:
        raise ConfigError(f"{origin}: unknown section [{section}]; expected one of {sorted(KEYS)}")
    if key not in KEYS[section]:
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
    path, parse = KEYS[section][key]
    try:
        value = parse(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {section}.{key}: {exc}") from None
    obj, leaf = _resolve(cfg, path)
    setattr(obj, leaf, value)


def get_value(cfg: RunConfig, section: str, key: str):
    obj, leaf = _resolve(cfg, KEYS[section][key][0])
    return getattr(obj, leaf)


def default_run_config() -> RunConfig:
    return RunConfig(
        model=ModelConfig(text=TextEncoderConfig(), image=ImageEncoderConfig(), heads=HeadBankConfig())
    )


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``section.key=value`` overrides."""
    cfg = default_run_config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            text = Path(path).read_text(encoding="utf-8")
            parser.read_string(text, source=str(path))
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                set_value(cfg, section, key, raw, origin=str(path))
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        set_value(cfg, section, key, raw)
    return cfg.validate()


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def format_run_config(cfg: RunConfig) -> str:
    """Render every key; ``load_run_config`` reads the result back unchanged."""
    lines = []
    for section, keys in KEYS.items():
        lines.append(f"[{section}]")
        lines += [f"{key} = {_format(get_value(cfg, section, key))}" for key in keys]
        lines.append("")
    return "\n".join(lines)
