"""Miniature ALBERT-style encoder: factorised embeddings, one shared transformer
block applied ``num_layers`` times, and a tanh pooler over the first position."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor, make_rng

MASK_PENALTY = -1e9
NUM_SEGMENTS = 2
TEXT_STREAM = 1


@dataclass
class TextEncoderConfig:
    vocab_size: int = 1000
    embed_dim: int = 32
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 256
    max_seq_len: int = 64
    share_layers: bool = True
    factorized_embedding: bool = True

    def validate(self):
        for field in ("vocab_size", "embed_dim", "hidden_dim", "num_layers", "num_heads", "ff_dim", "max_seq_len"):
            if getattr(self, field) < 1:
                raise ConfigError(f"text encoder {field} must be >= 1, got {getattr(self, field)}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.factorized_embedding and self.embed_dim > self.hidden_dim:
            raise ConfigError(f"embed_dim {self.embed_dim} exceeds hidden_dim {self.hidden_dim}")
        return self

    @property
    def token_dim(self) -> int:
        return self.embed_dim if self.factorized_embedding else self.hidden_dim


# ALBERT-xlarge widths; vocabulary size matches the released SentencePiece model.
FULL_TEXT_CONFIG = TextEncoderConfig(
    vocab_size=30000, embed_dim=128, hidden_dim=2048, num_layers=24, num_heads=16, ff_dim=8192, max_seq_len=512
)


def _block_specs(prefix: str, c: TextEncoderConfig) -> dict[str, nn.ParamSpec]:
    h = c.hidden_dim
    specs = {}
    specs.update(nn.norm_specs(f"{prefix}.attn_norm", h))
    for proj in ("query", "key", "value", "attn_out"):
        # A key bias only shifts every score in a row equally, which softmax ignores.
        specs.update(nn.dense_specs(f"{prefix}.{proj}", h, h, bias=proj != "key"))
    specs.update(nn.norm_specs(f"{prefix}.ffn_norm", h))
    specs.update(nn.dense_specs(f"{prefix}.ffn_in", h, c.ff_dim))
    specs.update(nn.dense_specs(f"{prefix}.ffn_out", c.ff_dim, h))
    return specs


def text_parameter_specs(config: TextEncoderConfig) -> dict[str, nn.ParamSpec]:
    c = config.validate()
    d = c.token_dim
    specs = {
        "word_embeddings": nn.ParamSpec((c.vocab_size, d), "embedding"),
        "position_embeddings": nn.ParamSpec((c.max_seq_len, d), "embedding"),
        "segment_embeddings": nn.ParamSpec((NUM_SEGMENTS, d), "embedding"),
    }
    specs.update(nn.norm_specs("embedding_norm", d))
    if c.factorized_embedding:
        specs.update(nn.dense_specs("embedding_projection", c.embed_dim, c.hidden_dim, bias=False))
    if c.share_layers:
        specs.update(_block_specs("layer", c))
    else:
        for i in range(c.num_layers):
            specs.update(_block_specs(f"layer_{i}", c))
    specs.update(nn.norm_specs("final_norm", c.hidden_dim))
    specs.update(nn.dense_specs("pooler", c.hidden_dim, c.hidden_dim))
    return specs


def embedding_parameter_count(config: TextEncoderConfig) -> int:
    """Token-embedding parameters: ``V·E + E·H`` when factorised, else ``V·H``."""
    specs = text_parameter_specs(config)
    return sum(specs[k].size for k in ("word_embeddings", "embedding_projection.weight") if k in specs)


class TextEncoder:
    def __init__(self, config: TextEncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def output_dim(self) -> int:
        return self.config.hidden_dim

    def layer_prefix(self, i: int) -> str:
        return "layer" if self.config.share_layers else f"layer_{i}"

    def _block(self, x: Tensor, prefix: str, mask_add: np.ndarray) -> Tensor:
        p, c = self.params, self.config
        b, s, h = x.shape
        nh = c.num_heads
        dh = h // nh

        y = T.layer_norm(x, p[f"{prefix}.attn_norm.gamma"], p[f"{prefix}.attn_norm.beta"])

        def heads(name):
            z = T.dense(y, p[f"{prefix}.{name}.weight"], p.get(f"{prefix}.{name}.bias"))
            return z.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("query"), heads("key"), heads("value")
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = T.softmax(scores + mask_add)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, s, h)
        x = x + T.dense(ctx, p[f"{prefix}.attn_out.weight"], p[f"{prefix}.attn_out.bias"])

        y = T.layer_norm(x, p[f"{prefix}.ffn_norm.gamma"], p[f"{prefix}.ffn_norm.beta"])
        y = T.gelu(T.dense(y, p[f"{prefix}.ffn_in.weight"], p[f"{prefix}.ffn_in.bias"]))
        return x + T.dense(y, p[f"{prefix}.ffn_out.weight"], p[f"{prefix}.ffn_out.bias"])

    def forward(self, input_ids, input_mask, segment_ids=None, train: bool = False) -> Tensor:
        """Pooled text embedding, shape ``(H,)`` for one sequence or ``(B, H)`` for a batch.

        Dropout is not used inside the encoder, so ``train`` only exists for a
        uniform call signature.
        """
        ids = np.asarray(input_ids, dtype=np.int64)
        single = ids.ndim == 1
        ids = ids[None] if single else ids
        mask = np.asarray(input_mask).reshape(ids.shape)
        seg = np.zeros_like(ids) if segment_ids is None else np.asarray(segment_ids, dtype=np.int64).reshape(ids.shape)
        b, s = ids.shape
        c, p = self.config, self.params
        if s > c.max_seq_len:
            raise InputError(f"sequence length {s} exceeds max_seq_len {c.max_seq_len}")
        if seg.size and (seg.min() < 0 or seg.max() >= NUM_SEGMENTS):
            raise InputError(f"segment ids must lie in [0, {NUM_SEGMENTS})")

        x = T.embedding_lookup(p["word_embeddings"], ids)
        x = x + T.getitem(p["position_embeddings"], slice(0, s))
        x = x + T.embedding_lookup(p["segment_embeddings"], seg)
        x = T.layer_norm(x, p["embedding_norm.gamma"], p["embedding_norm.beta"])
        if c.factorized_embedding:
            x = T.matmul(x, p["embedding_projection.weight"])

        mask_add = np.where(mask[:, None, None, :] > 0, 0.0, MASK_PENALTY).astype(x.dtype)
        for i in range(c.num_layers):
            x = self._block(x, self.layer_prefix(i), mask_add)
        x = T.layer_norm(x, p["final_norm.gamma"], p["final_norm.beta"])

        first = T.getitem(x, (slice(None), 0))
        pooled = T.tanh(T.dense(first, p["pooler.weight"], p["pooler.bias"]))
        return pooled[0] if single else pooled

    __call__ = forward


def build_text_encoder(config: TextEncoderConfig, seed: int) -> TextEncoder:
    specs = text_parameter_specs(config)
    return TextEncoder(config, nn.materialize(specs, make_rng(seed, TEXT_STREAM)))
