"""Late fusion of image and text embeddings and the five-task head bank.

Also hosts the single-modality variants: the same head bank sits on top of
only the text or only the image encoder.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .dataio.labels import NUM_CLASSES, TASKS
from .dataio.sample import Batch, MemeSample, collate
from .errors import CheckpointError, ConfigError, InputError, ShapeError
from .image_encoder import ImageEncoder, ImageEncoderConfig, build_image_encoder, image_parameter_specs
from .tensor import Tensor, make_rng
from .text_encoder import TextEncoder, TextEncoderConfig, build_text_encoder, text_parameter_specs

HEAD_STREAM = 3
DROPOUT_STREAM = 4

VARIANT_ALIASES = {
    "text": "text",
    "text-only": "text",
    "image": "image",
    "image-only": "image",
    "multimodal": "multimodal",
}


def normalize_variant(name: str) -> str:
    try:
        return VARIANT_ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown model variant {name!r}; choose text, image or multimodal") from None


@dataclass
class HeadBankConfig:
    hidden1: int = 512
    hidden2: int = 256
    head_dropout: float = 0.3
    feature_dropout: float = 0.1
    class_counts: dict[str, int] = field(default_factory=lambda: dict(NUM_CLASSES))

    def validate(self):
        if self.class_counts != NUM_CLASSES:
            raise ConfigError(f"class counts are fixed at {NUM_CLASSES}, got {self.class_counts}")
        if self.hidden1 < 1 or self.hidden2 < 1:
            raise ConfigError("head hidden sizes must be >= 1")
        for name in ("head_dropout", "feature_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        return self


def head_parameter_specs(input_dim: int, config: HeadBankConfig) -> dict[str, nn.ParamSpec]:
    config.validate()
    specs = {}
    for task in TASKS:
        specs.update(nn.dense_specs(f"{task}.dense1", input_dim, config.hidden1))
        specs.update(nn.dense_specs(f"{task}.dense2", config.hidden1, config.hidden2))
        specs.update(nn.dense_specs(f"{task}.output", config.hidden2, config.class_counts[task]))
    return specs


class HeadBank:
    """Five independent classifier stacks; no parameters are shared between tasks."""

    def __init__(self, input_dim: int, config: HeadBankConfig, params: dict[str, Tensor]):
        self.input_dim = input_dim
        self.config = config
        self.params = params

    def forward(self, features: Tensor, train: bool = False, rng=None) -> dict[str, Tensor]:
        if features.shape[-1] != self.input_dim:
            raise ShapeError(f"head bank built for {self.input_dim}-d features, got {features.shape[-1]}")
        c, p = self.config, self.params
        x = T.dropout(features, c.feature_dropout, train, rng)
        outputs = {}
        for task in TASKS:
            h = T.relu(T.dense(x, p[f"{task}.dense1.weight"], p[f"{task}.dense1.bias"]))
            h = T.dropout(h, c.head_dropout, train, rng)
            h = T.relu(T.dense(h, p[f"{task}.dense2.weight"], p[f"{task}.dense2.bias"]))
            h = T.dropout(h, c.head_dropout, train, rng)
            logits = T.dense(h, p[f"{task}.output.weight"], p[f"{task}.output.bias"])
            outputs[task] = T.softmax(logits)
        return outputs

    __call__ = forward


def build_head_bank(input_dim: int, config: HeadBankConfig, seed: int) -> HeadBank:
    specs = head_parameter_specs(input_dim, config)
    return HeadBank(input_dim, config, nn.materialize(specs, make_rng(seed, HEAD_STREAM)))


def fuse(e_img: Tensor, e_txt: Tensor) -> Tensor:
    """Image embedding first, text embedding second."""
    return T.concat([e_img, e_txt], axis=-1)


def split_fused(fused: Tensor, image_dim: int) -> tuple[Tensor, Tensor]:
    img, txt = T.split(fused, [image_dim, fused.shape[-1] - image_dim], axis=-1)
    return img, txt


@dataclass
class ModelConfig:
    variant: str = "multimodal"
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    heads: HeadBankConfig = field(default_factory=HeadBankConfig)
    seed: int = 0

    def validate(self):
        self.variant = normalize_variant(self.variant)
        if self.uses_text:
            self.text.validate()
        if self.uses_image:
            self.image.validate()
        self.heads.validate()
        return self

    @property
    def uses_text(self) -> bool:
        return normalize_variant(self.variant) in ("text", "multimodal")

    @property
    def uses_image(self) -> bool:
        return normalize_variant(self.variant) in ("image", "multimodal")

    @property
    def head_input_dim(self) -> int:
        dim = 0
        if self.uses_image:
            dim += self.image.stack_channels[-1]
        if self.uses_text:
            dim += self.text.hidden_dim
        return dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            variant=d["variant"],
            text=TextEncoderConfig(**d["text"]),
            image=ImageEncoderConfig(**d["image"]),
            heads=HeadBankConfig(**d["heads"]),
            seed=d["seed"],
        ).validate()


def model_parameter_specs(config: ModelConfig) -> dict[str, nn.ParamSpec]:
    """Full parameter table of a model, without allocating it."""
    config.validate()
    specs = {}
    if config.uses_text:
        specs.update({f"text.{k}": v for k, v in text_parameter_specs(config.text).items()})
    if config.uses_image:
        specs.update({f"image.{k}": v for k, v in image_parameter_specs(config.image).items()})
    specs.update({f"heads.{k}": v for k, v in head_parameter_specs(config.head_input_dim, config.heads).items()})
    return specs


class MemeModel:
    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.text_encoder: TextEncoder | None = (
            build_text_encoder(config.text, config.seed) if config.uses_text else None
        )
        self.image_encoder: ImageEncoder | None = (
            build_image_encoder(config.image, config.seed) if config.uses_image else None
        )
        self.heads = build_head_bank(config.head_input_dim, config.heads, config.seed)
        self.rng = make_rng(config.seed, DROPOUT_STREAM)

    @property
    def variant(self) -> str:
        return self.config.variant

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        if self.text_encoder is not None:
            named += [(f"text.{k}", v) for k, v in self.text_encoder.params.items()]
        if self.image_encoder is not None:
            named += [(f"image.{k}", v) for k, v in self.image_encoder.params.items()]
        named += [(f"heads.{k}", v) for k, v in self.heads.params.items()]
        return named

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def encoder_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if not n.startswith("heads.")]

    def head_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("heads.")]

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    # --- forward -----------------------------------------------------------------

    def encode(self, batch: Batch, train: bool = False) -> Tensor:
        parts = []
        if self.image_encoder is not None:
            if batch.images is None:
                raise InputError(f"{self.variant} model needs images, batch has none")
            parts.append(self.image_encoder(Tensor(batch.images), train=train))
        if self.text_encoder is not None:
            if batch.input_ids is None:
                raise InputError(f"{self.variant} model needs text, batch has none")
            parts.append(self.text_encoder(batch.input_ids, batch.input_mask, batch.segment_ids, train=train))
        return parts[0] if len(parts) == 1 else fuse(*parts)

    def forward(self, batch: Batch | MemeSample | list[MemeSample], train: bool = False) -> dict[str, Tensor]:
        if isinstance(batch, MemeSample):
            batch = collate([batch])
        elif isinstance(batch, list):
            batch = collate(batch)
        return self.heads(self.encode(batch, train=train), train=train, rng=self.rng)

    __call__ = forward

    def predict(self, batch: Batch) -> np.ndarray:
        """Argmax class per task, shape ``(B, 5)`` in task order."""
        probs = self.forward(batch, train=False)
        return np.stack([probs[t].values.argmax(axis=-1) for t in TASKS], axis=1)

    # --- state -------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, values in state.items():
            if name not in params:
                continue
            if params[name].shape != tuple(values.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: model has {params[name].shape}, checkpoint has {tuple(values.shape)}"
                )
            params[name].values = np.array(values, dtype=params[name].dtype)


def model_forward(variant: str, model: MemeModel, sample, train: bool = False) -> dict[str, Tensor]:
    if normalize_variant(variant) != model.variant:
        raise ConfigError(f"model was built as {model.variant!r}, not {variant!r}")
    return model.forward(sample, train=train)
