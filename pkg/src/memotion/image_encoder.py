"""VGG-style convolutional encoder with the classifier layers removed.

Five stacks of 3×3 conv + ReLU, each closed by a 2×2 max-pool, then global
average pooling to a ``C_last`` vector. Because of the global pooling the
output size does not depend on the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_rng

NUM_STACKS = 5
IMAGE_CHANNELS = 3
IMAGE_STREAM = 2


@dataclass
class ImageEncoderConfig:
    input_resolution: int = 64
    stack_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 64])
    convs_per_stack: list[int] = field(default_factory=lambda: [1, 1, 1, 1, 1])

    def validate(self):
        if len(self.stack_channels) != NUM_STACKS or len(self.convs_per_stack) != NUM_STACKS:
            raise ConfigError(f"image encoder needs exactly {NUM_STACKS} stacks")
        if min(self.stack_channels) < 1 or min(self.convs_per_stack) < 1:
            raise ConfigError("channel counts and convs per stack must be >= 1")
        if self.input_resolution < 1 or self.input_resolution % 2**NUM_STACKS:
            raise ConfigError(f"input_resolution {self.input_resolution} is not divisible by {2**NUM_STACKS}")
        return self


# VGG-16 convolutional trunk. 512 is the nearest multiple of 32 to the 500-pixel
# resize; 500 itself cannot go through five exact 2×2 pools.
FULL_IMAGE_CONFIG = ImageEncoderConfig(
    input_resolution=512, stack_channels=[64, 128, 256, 512, 512], convs_per_stack=[2, 2, 3, 3, 3]
)


def image_parameter_specs(config: ImageEncoderConfig) -> dict[str, nn.ParamSpec]:
    config.validate()
    specs = {}
    c_in = IMAGE_CHANNELS
    for s, (c_out, n_convs) in enumerate(zip(config.stack_channels, config.convs_per_stack)):
        for j in range(n_convs):
            specs[f"stack{s}.conv{j}.kernel"] = nn.ParamSpec((c_out, c_in, 3, 3), "he", fan_in=c_in * 9)
            specs[f"stack{s}.conv{j}.bias"] = nn.ParamSpec((c_out,), "zeros")
            c_in = c_out
    return specs


class ImageEncoder:
    def __init__(self, config: ImageEncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def output_dim(self) -> int:
        return self.config.stack_channels[-1]

    def feature_maps(self, image: Tensor) -> list[Tensor]:
        """Output of every pooling stage, for structural inspection."""
        r = self.config.input_resolution
        if image.ndim not in (3, 4) or image.shape[-3:] != (IMAGE_CHANNELS, r, r):
            raise ShapeError(f"expected image of shape {IMAGE_CHANNELS}×{r}×{r}, got {image.shape}")
        x, maps = image, []
        for s, n_convs in enumerate(self.config.convs_per_stack):
            for j in range(n_convs):
                x = T.relu(T.conv2d(x, self.params[f"stack{s}.conv{j}.kernel"], self.params[f"stack{s}.conv{j}.bias"]))
            x = T.maxpool2d(x)
            maps.append(x)
        return maps

    def forward(self, image, train: bool = False) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image))
        return T.global_avg_pool(self.feature_maps(image)[-1])

    __call__ = forward


def build_image_encoder(config: ImageEncoderConfig, seed: int) -> ImageEncoder:
    specs = image_parameter_specs(config)
    return ImageEncoder(config, nn.materialize(specs, make_rng(seed, IMAGE_STREAM)))
