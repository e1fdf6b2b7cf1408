"""Parameter specifications and initialisers shared by the encoders and heads.

Every component first describes its parameters as ``name -> ParamSpec`` so
that shapes and counts can be inspected at any scale without allocating
memory; :func:`materialize` turns a spec table into tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, get_default_dtype


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    init: str  # "glorot" | "he" | "embedding" | "zeros" | "ones"
    fan_in: int = 0
    fan_out: int = 0

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def dense_specs(prefix: str, n_in: int, n_out: int, bias: bool = True) -> dict[str, ParamSpec]:
    specs = {f"{prefix}.weight": ParamSpec((n_in, n_out), "glorot", n_in, n_out)}
    if bias:
        specs[f"{prefix}.bias"] = ParamSpec((n_out,), "zeros")
    return specs


def norm_specs(prefix: str, dim: int) -> dict[str, ParamSpec]:
    return {f"{prefix}.gamma": ParamSpec((dim,), "ones"), f"{prefix}.beta": ParamSpec((dim,), "zeros")}


def count(specs: dict[str, ParamSpec]) -> int:
    return sum(s.size for s in specs.values())


def init_array(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    dtype = get_default_dtype()
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=dtype)
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=dtype)
    if spec.init == "embedding":
        return (rng.standard_normal(spec.shape) * 0.02).astype(dtype)
    if spec.init == "glorot":
        limit = math.sqrt(6.0 / (spec.fan_in + spec.fan_out))
    elif spec.init == "he":
        limit = math.sqrt(6.0 / spec.fan_in)
    else:
        raise ValueError(f"unknown initialiser {spec.init!r}")
    return rng.uniform(-limit, limit, size=spec.shape).astype(dtype)


def materialize(specs: dict[str, ParamSpec], rng: np.random.Generator) -> dict[str, Tensor]:
    return {name: Tensor(init_array(spec, rng), trainable=True, name=name) for name, spec in specs.items()}


def exempt_from_decay(name: str) -> bool:
    """Biases and normalisation parameters are not weight-decayed."""
    return name.endswith(".bias") or name.endswith(".beta") or name.endswith(".gamma")
