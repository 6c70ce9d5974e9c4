"""Channel-mixing strategies compared against the compressive-memory mixer.

Four interchangeable designs, all driven by the same encoder backbone:

* ``INDEPENDENT`` — every channel is processed in isolation (no mixing).
* ``CONCAT`` — channels are flattened into one long token sequence; attention
  scores get a same-channel / cross-channel scalar bias pair.
* ``ICM`` — compressive-memory channel mixing (see :mod:`icmixer.attention`).
* ``ICM_STATIC`` — ICM plus a learned static embedding per channel index,
  added to the patch embeddings. Note this deliberately breaks channel
  permutation equivariance: rows are assigned by position in the batch.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .attention import AttentionConfig, ConfigError, MultiHeadSelfAttention
from .tensor import DimensionError, Parameter, Tensor


class MixerKind(str, Enum):
    INDEPENDENT = "independent"
    CONCAT = "concat"
    ICM = "icm"
    ICM_STATIC = "icm-static"


class CapacityError(ConfigError):
    """More channels than the static embedding table can hold."""


class ChannelBias:
    """Two trainable scalars biasing concat-attention scores.

    ``u1`` is added where query and key tokens come from the same channel,
    ``u2`` where they come from different channels. Shared across layers
    and heads.
    """

    def __init__(self, prefix: str = "channel_bias", dtype=np.float64):
        self.u1 = Parameter(np.zeros(()), f"{prefix}.u1", dtype=dtype)
        self.u2 = Parameter(np.zeros(()), f"{prefix}.u2", dtype=dtype)

    def parameters(self):
        return [self.u1, self.u2]


class StaticChannelEmbedding:
    """One learned d_model-vector per channel slot, added to patch embeddings."""

    def __init__(self, max_channels: int, d_model: int,
                 rng: np.random.Generator, prefix: str = "channel_embed", dtype=np.float64):
        self.max_channels = max_channels
        self.table = Parameter(
            rng.standard_normal((max_channels, d_model)) * 0.02, f"{prefix}.table", dtype=dtype)

    def parameters(self):
        return [self.table]


def channel_independent_forward(x: Tensor, layer: MultiHeadSelfAttention) -> Tensor:
    """Vanilla attention applied per channel; [b, m, n, d] with m as a batch dim."""
    return layer(x)


def add_static_channel_embedding(x: Tensor, embedding: StaticChannelEmbedding) -> Tensor:
    """Add embedding row c to every patch of channel c; x is [b, m, n_patches, d]."""
    m = x.shape[1]
    if m > embedding.max_channels:
        raise CapacityError(
            f"{m} channels exceed embedding capacity {embedding.max_channels}")
    d = x.shape[-1]
    return x + embedding.table[:m].reshape(1, m, 1, d)


def same_channel_mask(m: int, n: int) -> np.ndarray:
    """[m*n, m*n] indicator: 1 where both tokens belong to the same channel."""
    channel_of = np.repeat(np.arange(m), n)
    return (channel_of[:, None] == channel_of[None, :]).astype(np.float64)


def concat_attention_scores(x: Tensor, layer: "ConcatAttention") -> Tensor:
    """Raw biased scores [h, m*n, m*n] for a single batch item [m, n, d_model]."""
    m, n, _ = x.shape
    q, k, _ = layer.project_qkv(x.reshape(1, m * n, layer.config.d_model))
    scale = 1.0 / math.sqrt(layer.config.d_k)
    scores = (q @ k.swapaxes(-1, -2)) * scale
    mask = Tensor(same_channel_mask(m, n))
    return (scores + layer.bias.u1 * mask + layer.bias.u2 * (1.0 - mask)).reshape(
        layer.config.n_heads, m * n, m * n)


class ConcatAttention(MultiHeadSelfAttention):
    """Attention over the flattened channel-token sequence with channel-relative bias.

    The bias object is owned by the model (shared across layers) and is not
    reported among this layer's own parameters.
    """

    def __init__(self, config: AttentionConfig, rng: np.random.Generator,
                 prefix: str, bias: ChannelBias, dtype=np.float64):
        super().__init__(config, rng, prefix, dtype=dtype)
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"expected [batch, m, n, d_model], got {x.shape}")
        b, m, n, d = x.shape
        flat = x.reshape(b, m * n, d)
        q, k, v = self.project_qkv(flat)  # [b, h, m*n, d_k]
        scale = 1.0 / math.sqrt(self.config.d_k)
        scores = (q @ k.swapaxes(-1, -2)) * scale
        mask = Tensor(same_channel_mask(m, n))
        scores = scores + self.bias.u1 * mask + self.bias.u2 * (1.0 - mask)
        att = scores.softmax(axis=-1) @ v
        h = self.config.n_heads
        merged = att.swapaxes(-3, -2).reshape(b, m * n, h * self.config.d_k)
        return (merged @ self.wo).reshape(b, m, n, d)
