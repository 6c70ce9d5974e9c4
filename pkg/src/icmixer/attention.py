"""Bidirectional multi-head self-attention and its compressive-memory extension.

The memory path reuses the per-head Q/K/V projections of dot-product
attention. Keys and values from every channel are folded into a fixed-size
matrix ``M`` (one d_k x d_k block per head) plus a normalizer ``z``; each
channel then queries that shared memory and blends the result with its own
local attention output through a learned per-head gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Parameter, Tensor


class ConfigError(ValueError):
    """Raised for invalid architecture or run configuration."""


@dataclass
class AttentionConfig:
    d_model: int
    n_heads: int
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class MemoryState:
    """Per-head memory matrix M [h, d_k, d_k] and normalizer z [h, d_k, 1]."""

    M: Tensor
    z: Tensor

    @classmethod
    def zeros(cls, n_heads: int, d_k: int, dtype=np.float64) -> "MemoryState":
        return cls(
            M=Tensor(np.zeros((n_heads, d_k, d_k), dtype=dtype)),
            z=Tensor(np.zeros((n_heads, d_k, 1), dtype=dtype)),
        )


def sigma(x: Tensor) -> Tensor:
    """Strictly positive feature map: ELU(x) + 1."""
    return x.elu() + 1.0


def accumulate_memory(state: MemoryState, k: Tensor, v: Tensor) -> MemoryState:
    """Fold one channel's keys/values [h, n, d_k] into the memory state."""
    if k.shape != v.shape or k.shape[0] != state.M.shape[0] or k.shape[-1] != state.M.shape[-1]:
        raise DimensionError(
            f"memory accumulation shape mismatch: K {k.shape}, V {v.shape}, M {state.M.shape}")
    sk = sigma(k)
    m_new = state.M + sk.swapaxes(-1, -2) @ v
    z_new = state.z + sk.sum(axis=-2).reshape(k.shape[0], k.shape[-1], 1)
    return MemoryState(M=m_new, z=z_new)


def retrieve_memory(q: Tensor, state: MemoryState, epsilon: float) -> Tensor:
    """Query the accumulated memory: sigma(Q) M / (sigma(Q) z + epsilon)."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    sq = sigma(q)
    return (sq @ state.M) / (sq @ state.z + epsilon)


def dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Bidirectional scaled dot-product attention, softmax over keys."""
    d_k = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    return scores.softmax(axis=-1) @ v


def gate_combine(a_mem: Tensor, a_dot: Tensor, beta: Tensor) -> Tensor:
    """Per-head convex combination: sigmoid(beta) memory + (1 - sigmoid(beta)) local."""
    g = beta.sigmoid().reshape(beta.shape[0], 1, 1)
    return g * a_mem + (1.0 - g) * a_dot


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., n, d_model] -> [..., h, n, d_k]."""
    *lead, n, d_model = x.shape
    d_k = d_model // n_heads
    return x.reshape(*lead, n, n_heads, d_k).swapaxes(-3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """[..., h, n, d_k] -> [..., n, h*d_k]."""
    *lead, h, n, d_k = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, n, h * d_k)


class MultiHeadSelfAttention:
    """Vanilla per-sequence attention; leading dims (batch, channel) are batched."""

    def __init__(self, config: AttentionConfig, rng: np.random.Generator,
                 prefix: str, dtype=np.float64):
        self.config = config
        d = config.d_model
        scale = 1.0 / math.sqrt(d)

        def lin(name):
            return Parameter(rng.standard_normal((d, d)) * scale, f"{prefix}.{name}", dtype=dtype)

        self.wq, self.wk, self.wv, self.wo = lin("wq"), lin("wk"), lin("wv"), lin("wo")

    def parameters(self):
        return [self.wq, self.wk, self.wv, self.wo]

    def project_qkv(self, x: Tensor):
        """[..., n, d_model] -> per-head Q, K, V each [..., h, n, d_k]."""
        if x.shape[-1] != self.config.d_model:
            raise DimensionError(
                f"input width {x.shape[-1]} != d_model {self.config.d_model}")
        h = self.config.n_heads
        return (split_heads(x @ self.wq, h),
                split_heads(x @ self.wk, h),
                split_heads(x @ self.wv, h))

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self.project_qkv(x)
        return merge_heads(dot_attention(q, k, v)) @ self.wo


class ICMAttention(MultiHeadSelfAttention):
    """Attention with a per-layer compressive memory shared across channels.

    Input is [batch, m, n, d_model]. A fresh memory is built per forward call:
    every channel's sigma(K)^T V is summed into M (and key sums into z), then
    each channel retrieves from the completed memory. Accumulation finishes
    before any retrieval, so channel order cannot matter.
    """

    def __init__(self, config, rng, prefix, dtype=np.float64):
        super().__init__(config, rng, prefix, dtype=dtype)
        self.beta = Parameter(np.zeros(config.n_heads), f"{prefix}.beta", dtype=dtype)

    def parameters(self):
        return super().parameters() + [self.beta]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"expected [batch, m, n, d_model], got {x.shape}")
        if x.shape[1] == 0:
            raise DimensionError("at least one channel is required")
        q, k, v = self.project_qkv(x)  # [b, m, h, n, d_k]
        b, m, h, n, d_k = q.shape

        sk = sigma(k)
        mem = (sk.swapaxes(-1, -2) @ v).sum(axis=1)            # [b, h, d_k, d_k]
        z = sk.sum(axis=(1, 3)).reshape(b, 1, h, d_k, 1)       # keys summed over channels+tokens

        a_dot = dot_attention(q, k, v)
        sq = sigma(q)
        a_mem = (sq @ mem.reshape(b, 1, h, d_k, d_k)) / (sq @ z + self.config.epsilon)

        g = self.beta.sigmoid().reshape(1, 1, h, 1, 1)
        return merge_heads(g * a_mem + (1.0 - g) * a_dot) @ self.wo


def icm_attention_reference(x: Tensor, layer: ICMAttention) -> Tensor:
    """Channel-at-a-time transcription of the memory equations, for one batch item.

    Slow path used as an independent check of the vectorized layer:
    x is [m, n, d_model]; returns [m, n, d_model].
    """
    cfg = layer.config
    q, k, v = layer.project_qkv(x)  # [m, h, n, d_k]
    m = x.shape[0]
    state = MemoryState.zeros(cfg.n_heads, cfg.d_k, dtype=x.dtype)
    for i in range(m):
        state = accumulate_memory(state, k[i], v[i])
    outs = []
    for i in range(m):
        a_mem = retrieve_memory(q[i], state, cfg.epsilon)
        a_dot = dot_attention(q[i], k[i], v[i])
        outs.append(merge_heads(gate_combine(a_mem, a_dot, layer.beta)))
    from .tensor import stack
    return stack(outs, axis=0) @ layer.wo
