"""Scaled dot-product attention, Linformer compression and the pre-norm encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .tensor_compute import (
    ConfigError,
    DimensionError,
    RngState,
    Tensor,
    dropout,
    gelu,
    layernorm,
    linear,
    softmax,
)


@dataclass
class AttentionConfig:
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 2
    seq_len: int = 50
    # Projected key/value length; ``linformer=False`` uses full attention.
    linformer_k: int = 32
    linformer: bool = True
    tie_kv_projections: bool = False
    dropout_rate: float = 0.1
    mlp_hidden: int = 512
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if min(self.d_model, self.n_heads, self.seq_len, self.mlp_hidden) < 1 or self.n_layers < 0:
            raise ConfigError(f"attention sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 1 <= self.linformer_k <= self.seq_len:
            raise ConfigError(
                f"linformer_k={self.linformer_k} must lie in [1, seq_len={self.seq_len}]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _uniform(shape, bound: float, gen: torch.Generator | None) -> nn.Parameter:
    return nn.Parameter((torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q Kᵀ / √d_k) V over the last two axes (leading axes are batch)."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"query width {q.shape[-1]} != key width {k.shape[-1]} "
            f"({tuple(q.shape)} vs {tuple(k.shape)})")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"key length {k.shape[-2]} != value length {v.shape[-2]} "
            f"({tuple(k.shape)} vs {tuple(v.shape)})")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return softmax(scores) @ v


def linformer_project(k: Tensor, v: Tensor, e: Tensor, f: Tensor) -> tuple[Tensor, Tensor]:
    """Compress the sequence axis of keys and values: returns ``(Eᵀ K, Fᵀ V)``."""
    m = k.shape[-2]
    if e.dim() != 2 or f.dim() != 2 or e.shape[0] != m or f.shape[0] != v.shape[-2] or e.shape != f.shape:
        raise DimensionError(
            f"linformer projections {tuple(e.shape)}/{tuple(f.shape)} do not fit "
            f"keys {tuple(k.shape)} and values {tuple(v.shape)}")
    return e.transpose(0, 1) @ k, f.transpose(0, 1) @ v


class EncoderLayer(nn.Module):
    """Parameters of one pre-norm encoder block.

    The Q/K/V matrices hold all heads side by side: rows
    ``h*d_k:(h+1)*d_k`` of ``wq`` are head ``h``'s query projection.
    """

    def __init__(self, config: AttentionConfig, gen: torch.Generator | None = None):
        super().__init__()
        d, hid, n, k = config.d_model, config.mlp_hidden, config.seq_len, config.linformer_k
        self.config = config
        b = 1.0 / math.sqrt(d)
        self.ln1_gain = nn.Parameter(torch.ones(d))
        self.ln1_shift = nn.Parameter(torch.zeros(d))
        self.wq, self.bq = _uniform((d, d), b, gen), _uniform((d,), b, gen)
        self.wk, self.bk = _uniform((d, d), b, gen), _uniform((d,), b, gen)
        self.wv, self.bv = _uniform((d, d), b, gen), _uniform((d,), b, gen)
        self.wo, self.bo = _uniform((d, d), b, gen), _uniform((d,), b, gen)
        if config.linformer:
            self.proj_k = _uniform((n, k), 1.0 / math.sqrt(k), gen)
            self.proj_v = None if config.tie_kv_projections else _uniform((n, k), 1.0 / math.sqrt(k), gen)
        self.ln2_gain = nn.Parameter(torch.ones(d))
        self.ln2_shift = nn.Parameter(torch.zeros(d))
        self.w1, self.b1 = _uniform((hid, d), b, gen), _uniform((hid,), b, gen)
        b2 = 1.0 / math.sqrt(hid)
        self.w2, self.b2 = _uniform((d, hid), b2, gen), _uniform((d,), b2, gen)

    def kv_projections(self) -> tuple[Tensor, Tensor] | None:
        if not self.config.linformer:
            return None
        return self.proj_k, (self.proj_k if self.proj_v is None else self.proj_v)

    def forward(self, x: Tensor, rng: RngState | None = None, training: bool = False) -> Tensor:
        return encoder_layer_forward(x, self, self.config, rng, training)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = t.shape
    return t.reshape(*lead, n, n_heads, d // n_heads).transpose(-3, -2)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, dk = t.shape
    return t.transpose(-3, -2).reshape(*lead, n, h * dk)


def multi_head_attention(x: Tensor, params: EncoderLayer, config: AttentionConfig,
                         rng: RngState | None = None, training: bool = False) -> Tensor:
    """Multi-head self-attention over ``x`` of shape ``(..., seq_len, d_model)``.

    Keys and values are compressed along the sequence axis (shared across
    heads) before attention when the Linformer path is enabled.
    """
    if x.shape[-1] != config.d_model:
        raise DimensionError(f"input width {x.shape[-1]} != d_model {config.d_model}")
    q = linear(x, params.wq, params.bq)
    k = linear(x, params.wk, params.bk)
    v = linear(x, params.wv, params.bv)
    proj = params.kv_projections()
    if proj is not None:
        if x.shape[-2] != config.seq_len:
            raise DimensionError(
                f"Linformer attention needs exactly seq_len={config.seq_len} rows, got {x.shape[-2]}")
        k, v = linformer_project(k, v, *proj)
    heads = scaled_dot_product_attention(
        _split_heads(q, config.n_heads), _split_heads(k, config.n_heads), _split_heads(v, config.n_heads))
    out = linear(_merge_heads(heads), params.wo, params.bo)
    return dropout(out, config.dropout_rate, rng, training)


def mlp_block(x: Tensor, params: EncoderLayer, config: AttentionConfig,
              rng: RngState | None, training: bool) -> Tensor:
    hidden = gelu(linear(x, params.w1, params.b1))
    hidden = dropout(hidden, config.dropout_rate, rng, training)
    return linear(hidden, params.w2, params.b2)


def encoder_layer_forward(x: Tensor, params: EncoderLayer, config: AttentionConfig,
                          rng: RngState | None, training: bool) -> Tensor:
    x = x + multi_head_attention(
        layernorm(x, params.ln1_gain, params.ln1_shift, config.ln_eps), params, config, rng, training)
    return x + mlp_block(
        layernorm(x, params.ln2_gain, params.ln2_shift, config.ln_eps), params, config, rng, training)


def encoder_forward(x: Tensor, layers, config: AttentionConfig,
                    rng: RngState | None = None, training: bool = False) -> Tensor:
    layers = list(layers)
    if len(layers) != config.n_layers:
        raise ConfigError(f"expected {config.n_layers} encoder layers, got {len(layers)}")
    for layer in layers:
        x = encoder_layer_forward(x, layer, config, rng, training)
    return x


class Encoder(nn.Module):
    def __init__(self, config: AttentionConfig, gen: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(EncoderLayer(config, gen) for _ in range(config.n_layers))

    def forward(self, x: Tensor, rng: RngState | None = None, training: bool = False) -> Tensor:
        return encoder_forward(x, self.layers, self.config, rng, training)
