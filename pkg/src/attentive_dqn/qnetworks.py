"""The baseline DQN network and the CNN + transformer hybrid Q-network."""

from __future__ import annotations

import dataclasses
import math

import torch
from torch import nn

from .attention import AttentionConfig, Encoder
from .tensor_compute import (
    ConfigError,
    DimensionError,
    RngState,
    Tensor,
    conv2d,
    layernorm,
    linear,
    relu,
)

OBS_SHAPE = (4, 84, 84)
# (out_channels, kernel, stride) of the Nature-DQN stack.
BACKBONE_LAYERS = ((32, 8, 4), (64, 4, 2), (64, 3, 1))
FEATURE_SHAPE = (64, 7, 7)
MODEL_KINDS = ("baseline", "attentive")


def _fan_in_uniform(shape, fan_in: int, gen: torch.Generator | None) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter((torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound)


def _normal(shape, std: float, gen: torch.Generator | None) -> nn.Parameter:
    return nn.Parameter(torch.randn(shape, generator=gen) * std)


def _shape_str(shape) -> str:
    return "×".join(str(s) for s in shape)


def scale_obs(obs: Tensor, dtype: torch.dtype) -> Tensor:
    """Byte frames are divided by 255; float input is assumed already in [0, 1]."""
    if obs.dtype == torch.uint8:
        return obs.to(dtype) / 255.0
    return obs.to(dtype)


class ConvBackbone(nn.Module):
    def __init__(self, in_channels: int = 4, gen: torch.Generator | None = None):
        super().__init__()
        self.strides = []
        c_in = in_channels
        for i, (c_out, k, s) in enumerate(BACKBONE_LAYERS, start=1):
            fan_in = c_in * k * k
            setattr(self, f"conv{i}_w", _fan_in_uniform((c_out, c_in, k, k), fan_in, gen))
            setattr(self, f"conv{i}_b", _fan_in_uniform((c_out,), fan_in, gen))
            self.strides.append(s)
            c_in = c_out

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        for i, s in enumerate(self.strides, start=1):
            x = relu(conv2d(x, getattr(self, f"conv{i}_w"), getattr(self, f"conv{i}_b"), s))
            if trace is not None:
                trace.append((f"conv{i}", tuple(x.shape[-3:])))
        return x


def tokenize(features: Tensor) -> Tensor:
    """Reshape ``(..., C, H, W)`` feature maps into ``(..., H*W, C)`` tokens.

    Token ``r*W + c`` is the channel vector at spatial position ``(r, c)``.
    """
    if features.dim() < 3:
        raise DimensionError(f"tokenize expects C×H×W (optionally batched), got {tuple(features.shape)}")
    return features.flatten(-2).transpose(-2, -1)


def untokenize(tokens: Tensor, height: int, width: int) -> Tensor:
    if tokens.dim() < 2 or tokens.shape[-2] != height * width:
        raise DimensionError(f"cannot fold {tuple(tokens.shape)} into {height}×{width} maps")
    return tokens.transpose(-2, -1).reshape(*tokens.shape[:-2], tokens.shape[-1], height, width)


class BaselineQNet(nn.Module):
    kind = "baseline"

    def __init__(self, n_actions: int, gen: torch.Generator | None = None):
        super().__init__()
        if n_actions < 1:
            raise ConfigError(f"n_actions must be positive, got {n_actions}")
        self.n_actions = n_actions
        self.backbone = ConvBackbone(gen=gen)
        flat = math.prod(FEATURE_SHAPE)
        self.fc_w = _fan_in_uniform((512, flat), flat, gen)
        self.fc_b = _fan_in_uniform((512,), flat, gen)
        self.head_w = _fan_in_uniform((n_actions, 512), 512, gen)
        self.head_b = _fan_in_uniform((n_actions,), 512, gen)

    def forward(self, obs: Tensor, rng: RngState | None = None, training: bool = False,
                trace: list | None = None) -> Tensor:
        x = scale_obs(obs, self.fc_w.dtype)
        if trace is not None:
            trace.append(("input", tuple(x.shape[-3:])))
        feats = self.backbone(x, trace)
        flat = feats.flatten(-3)
        hidden = relu(linear(flat, self.fc_w, self.fc_b))
        q = linear(hidden, self.head_w, self.head_b)
        if trace is not None:
            trace += [("flatten", (flat.shape[-1],)), ("hidden", (hidden.shape[-1],)),
                      ("q", (q.shape[-1],))]
        return q


class AttentiveQNet(nn.Module):
    """Conv backbone → 49 feature tokens + value token → encoder → value-token readout.

    The value token sits at sequence index 0 and uses positional row
    ``n_tokens`` (the last row); feature token ``i`` uses positional row ``i``.
    ``positional_combine="concat"`` concatenates instead of adding positional
    rows, which doubles the encoder width.
    """

    kind = "attentive"

    def __init__(self, n_actions: int, config: AttentionConfig | None = None,
                 positional_combine: str = "add", gen: torch.Generator | None = None):
        super().__init__()
        if n_actions < 1:
            raise ConfigError(f"n_actions must be positive, got {n_actions}")
        if positional_combine not in ("add", "concat"):
            raise ConfigError(f"positional_combine must be 'add' or 'concat', got {positional_combine!r}")
        config = config or AttentionConfig()
        n_tokens = FEATURE_SHAPE[1] * FEATURE_SHAPE[2]
        if config.seq_len != n_tokens + 1:
            raise ConfigError(f"seq_len must be {n_tokens + 1} (49 feature tokens + value token)")
        self.n_actions = n_actions
        self.positional_combine = positional_combine
        self.embed_dim = config.d_model
        self.config = config
        if positional_combine == "concat":
            self.encoder_config = dataclasses.replace(config, d_model=2 * config.d_model)
        else:
            self.encoder_config = config
        d, d_enc, c = config.d_model, self.encoder_config.d_model, FEATURE_SHAPE[0]

        self.backbone = ConvBackbone(gen=gen)
        self.token_w = _fan_in_uniform((d, c), c, gen)
        self.token_b = _fan_in_uniform((d,), c, gen)
        self.pos_embedding = _normal((config.seq_len, d), 0.02, gen)
        self.value_token = _normal((1, d), 0.02, gen)
        self.encoder = Encoder(self.encoder_config, gen)
        self.head_ln_gain = nn.Parameter(torch.ones(d_enc))
        self.head_ln_shift = nn.Parameter(torch.zeros(d_enc))
        self.head_w = _fan_in_uniform((n_actions, d_enc), d_enc, gen)
        self.head_b = _fan_in_uniform((n_actions,), d_enc, gen)

    def features(self, obs: Tensor, trace: list | None = None) -> Tensor:
        x = scale_obs(obs, self.token_w.dtype)
        if trace is not None:
            trace.append(("input", tuple(x.shape[-3:])))
        return self.backbone(x, trace)

    def embed(self, tokens: Tensor) -> Tensor:
        """Project feature tokens and attach positional rows and the value token."""
        emb = linear(tokens, self.token_w, self.token_b)
        n = emb.shape[-2]
        lead = emb.shape[:-2]
        pos_feat, pos_value = self.pos_embedding[:n], self.pos_embedding[n:n + 1]
        if self.positional_combine == "add":
            emb = emb + pos_feat
            value = self.value_token + pos_value
        else:
            emb = torch.cat([emb, pos_feat.expand(*lead, n, -1)], dim=-1)
            value = torch.cat([self.value_token, pos_value], dim=-1)
        value = value.expand(*lead, 1, value.shape[-1])
        return torch.cat([value, emb], dim=-2)

    def q_from_features(self, feats: Tensor, rng: RngState | None = None, training: bool = False,
                        trace: list | None = None) -> Tensor:
        tokens = tokenize(feats)
        seq = self.embed(tokens)
        enc = self.encoder(seq, rng, training)
        value = layernorm(enc[..., 0, :], self.head_ln_gain, self.head_ln_shift, self.config.ln_eps)
        q = linear(value, self.head_w, self.head_b)
        if __debug__:
            d_enc = self.encoder_config.d_model
            assert tuple(feats.shape[-3:]) == FEATURE_SHAPE, feats.shape
            assert tuple(tokens.shape[-2:]) == (49, FEATURE_SHAPE[0]), tokens.shape
            assert tuple(seq.shape[-2:]) == (self.config.seq_len, d_enc), seq.shape
            assert enc.shape == seq.shape, enc.shape
            assert value.shape[-1] == d_enc and q.shape[-1] == self.n_actions
        if trace is not None:
            trace += [("tokens", tuple(tokens.shape[-2:])), ("sequence", tuple(seq.shape[-2:])),
                      ("encoded", tuple(enc.shape[-2:])), ("value", (value.shape[-1],)),
                      ("q", (q.shape[-1],))]
        return q

    def forward(self, obs: Tensor, rng: RngState | None = None, training: bool = False,
                trace: list | None = None) -> Tensor:
        return self.q_from_features(self.features(obs, trace), rng, training, trace)


def attentive_forward(net: AttentiveQNet, obs: Tensor, rng: RngState | None = None,
                      training: bool = False) -> Tensor:
    return net(obs, rng, training)


def baseline_forward(net: BaselineQNet, obs: Tensor) -> Tensor:
    return net(obs)


def make_qnet(kind: str, n_actions: int, config: AttentionConfig | None = None, seed: int = 0,
              positional_combine: str = "add") -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    if kind == "baseline":
        return BaselineQNet(n_actions, gen=gen)
    if kind == "attentive":
        return AttentiveQNet(n_actions, config, positional_combine, gen=gen)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


@torch.no_grad()
def sync_target(online: nn.Module, target: nn.Module) -> None:
    """Copy every online parameter value into the target network."""
    src, dst = dict(online.named_parameters()), dict(target.named_parameters())
    if type(online) is not type(target) or src.keys() != dst.keys() or any(
            src[k].shape != dst[k].shape for k in src):
        raise ConfigError("sync_target: online and target architectures differ")
    for name, p in dst.items():
        p.copy_(src[name])


@torch.no_grad()
def zero_parameters(net: nn.Module) -> None:
    for p in net.parameters():
        p.zero_()


def shape_pipeline(net: nn.Module) -> list[tuple[str, tuple]]:
    """Per-stage shapes (batch axis dropped) from tracing one zero observation."""
    trace: list = []
    with torch.no_grad():
        net(torch.zeros((1,) + OBS_SHAPE, dtype=torch.uint8), trace=trace)
    return trace


def pipeline_line(net: nn.Module) -> str:
    stages = dict(shape_pipeline(net))
    if isinstance(net, AttentiveQNet):
        keys = ["input", "conv3", "tokens", "sequence", "value", "q"]
    else:
        keys = ["input", "conv1", "conv2", "conv3", "flatten", "hidden", "q"]
    return " → ".join(_shape_str(stages[k]) for k in keys)


def describe(net: nn.Module) -> dict:
    params = [{"name": n, "shape": list(p.shape), "count": p.numel()}
              for n, p in net.named_parameters()]
    return {
        "model": net.kind,
        "n_actions": net.n_actions,
        "pipeline": pipeline_line(net),
        "stages": [{"stage": s, "shape": list(shape)} for s, shape in shape_pipeline(net)],
        "parameters": params,
        "total_parameters": sum(p["count"] for p in params),
    }
