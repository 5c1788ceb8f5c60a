"""Property checks run by ``attentive-dqn verify``.

Each check returns a :class:`CheckResult`; the command exits non-zero if any
fails. The gradient checks run in float64 with central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch

from . import tensor_compute as tc
from .attention import (
    AttentionConfig,
    EncoderLayer,
    encoder_forward,
    linformer_project,
    multi_head_attention,
    scaled_dot_product_attention,
)
from .qnetworks import (
    FEATURE_SHAPE,
    AttentiveQNet,
    BaselineQNet,
    make_qnet,
    parameter_count,
    shape_pipeline,
)

GRAD_TOL = 1e-4
FD_STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    values: dict = field(default_factory=dict)


def _leaf(shape, gen, scale=1.0, positive=False):
    t = torch.randn(shape, generator=gen, dtype=torch.float64) * scale
    if positive:
        t = t.abs() + 0.5
    return t.requires_grad_(True)


def op_gradient_cases(seed: int) -> Iterator[tuple[str, Callable, list]]:
    """Scalar test functions over every differentiable op, in float64."""
    g = torch.Generator().manual_seed(seed)

    def weights(shape):
        return torch.randn(shape, generator=g, dtype=torch.float64)

    a, b = _leaf((4, 5), g), _leaf((5, 3), g)
    w = weights((4, 3))
    yield "matmul", lambda: (tc.matmul(a, b) * w).sum(), [a, b]

    x, k, bias = _leaf((2, 9, 9), g), _leaf((3, 2, 3, 3), g), _leaf((3,), g)
    wc = weights((3, 4, 4))
    yield "conv2d", lambda: (tc.conv2d(x, k, bias, stride=2) * wc).sum(), [x, k, bias]

    xl, wl, bl = _leaf((6, 5), g), _leaf((4, 5), g), _leaf((4,), g)
    w2 = weights((6, 4))
    yield "linear", lambda: (tc.linear(xl, wl, bl) * w2).sum(), [xl, wl, bl]

    xs = _leaf((3, 7), g, scale=2.0)
    w3 = weights((3, 7))
    yield "softmax", lambda: (tc.softmax(xs) * w3).sum(), [xs]

    xn, gain, shift = _leaf((4, 8), g), _leaf((8,), g), _leaf((8,), g)
    w4 = weights((4, 8))
    yield "layernorm", lambda: (tc.layernorm(xn, gain, shift) * w4).sum(), [xn, gain, shift]

    xr = _leaf((20,), g)
    w5 = weights((20,))
    yield "relu", lambda: (tc.relu(xr) * w5).sum(), [xr]
    yield "gelu", lambda: (tc.gelu(xr) * w5).sum(), [xr]

    rng = tc.RngState(seed)
    yield "dropout_eval", lambda: (tc.dropout(xr, 0.1, rng, training=False) * w5).sum(), [xr]

    pred, target = _leaf((10,), g, scale=2.0), _leaf((10,), g, scale=2.0)
    yield "huber_loss", lambda: tc.huber_loss(pred, target, 1.0), [pred, target]

    q, kk, v = _leaf((5, 8), g), _leaf((6, 8), g), _leaf((6, 4), g)
    w6 = weights((5, 4))
    yield "attention", lambda: (scaled_dot_product_attention(q, kk, v) * w6).sum(), [q, kk, v]

    km, vm, e, f = _leaf((6, 4), g), _leaf((6, 4), g), _leaf((6, 3), g), _leaf((6, 3), g)
    w7 = weights((3, 4))

    def lin():
        pk, pv = linformer_project(km, vm, e, f)
        return (pk * w7).sum() + (pv * w7 * 0.5).sum()
    yield "linformer_project", lin, [km, vm, e, f]

    cfg = AttentionConfig(d_model=16, n_heads=4, n_layers=2, seq_len=6, linformer_k=3,
                          dropout_rate=0.1, mlp_hidden=32)
    layers = [EncoderLayer(cfg, g).double() for _ in range(cfg.n_layers)]
    _perturb_norms(layers, g)
    xe = _leaf((6, 16), g)
    w8 = weights((6, 16))
    params = [xe] + [p for layer in layers for p in layer.parameters()]
    yield "encoder", lambda: (encoder_forward(xe, layers, cfg, None, False) * w8).sum(), params

    yield "multi_head_attention", lambda: (multi_head_attention(xe, layers[0], cfg) * w8).sum(), \
        [xe] + list(layers[0].parameters())


@torch.no_grad()
def _perturb_norms(modules, gen):
    """Move LayerNorm gains/shifts off their 1/0 init so their gradients are generic."""
    for m in modules:
        for name, p in m.named_parameters():
            if "gain" in name or "shift" in name:
                p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def network_gradient_error(kind: str, seed: int, n_actions: int = 6, max_coords: int = 4,
                           stats: dict | None = None) -> float:
    """Relative gradient error of a weighted sum of Q-values, float64, sampled coordinates.

    ReLU activation patterns are frozen at the base point (see
    :func:`finite_difference_check`).
    """
    net = make_qnet(kind, n_actions, seed=seed).double()
    gen = torch.Generator().manual_seed(seed + 7919)
    _perturb_norms([net], gen)
    obs = torch.rand((1, 4, 84, 84), generator=gen, dtype=torch.float64)
    w = torch.randn((1, n_actions), generator=gen, dtype=torch.float64)
    params = list(net.parameters())
    return tc.finite_difference_check(lambda: (net(obs) * w).sum(), params, FD_STEP,
                                      max_coords=max_coords, rng=np.random.default_rng(seed),
                                      freeze_relu=True, stats=stats)


def check_op_gradients(seeds=range(3)) -> CheckResult:
    worst, where = 0.0, ""
    for seed in seeds:
        for name, f, params in op_gradient_cases(seed):
            err = tc.finite_difference_check(f, params, FD_STEP)
            if err > worst:
                worst, where = err, f"{name} (seed {seed})"
    return CheckResult("op_gradients", worst < GRAD_TOL, f"max rel. error {worst:.2e} at {where}",
                       {"max_rel_error": worst})


def check_network_gradients(kind: str, seeds=range(2)) -> CheckResult:
    worst = max(network_gradient_error(kind, s) for s in seeds)
    return CheckResult(f"{kind}_gradients", worst < GRAD_TOL, f"max rel. error {worst:.2e}",
                       {"max_rel_error": worst})


def full_attention_reference(x, layer: EncoderLayer, config: AttentionConfig):
    """Head-by-head full attention with no sequence compression."""
    heads = []
    dk = config.head_dim
    for h in range(config.n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        q = x @ layer.wq[sl].T + layer.bq[sl]
        k = x @ layer.wk[sl].T + layer.bk[sl]
        v = x @ layer.wv[sl].T + layer.bv[sl]
        scores = q @ k.T / math.sqrt(dk)
        weights = torch.exp(scores - scores.max(dim=-1, keepdim=True).values)
        heads.append(weights / weights.sum(dim=-1, keepdim=True) @ v)
    return torch.cat(heads, dim=-1) @ layer.wo.T + layer.bo


def linformer_identity_error(seed: int) -> float:
    cfg = AttentionConfig(linformer_k=50, dropout_rate=0.1)
    gen = torch.Generator().manual_seed(seed)
    layer = EncoderLayer(cfg, gen)
    with torch.no_grad():
        layer.proj_k.copy_(torch.eye(50))
        layer.proj_v.copy_(torch.eye(50))
        x = torch.randn((50, 128), generator=gen)
        got = multi_head_attention(x, layer, cfg, None, training=False)
        ref = full_attention_reference(x, layer, cfg)
    return float((got - ref).abs().max())


def check_linformer_equivalence(trials: int = 20) -> CheckResult:
    worst = max(linformer_identity_error(s) for s in range(trials))
    return CheckResult("linformer_equivalence", worst < 1e-5, f"max abs diff {worst:.2e} over {trials} trials",
                       {"max_abs_diff": worst})


EXPECTED_ATTENTIVE_PIPELINE = [((4, 84, 84), "input"), ((64, 7, 7), "conv3"), ((49, 64), "tokens"),
                               ((50, 128), "sequence"), ((128,), "value")]


def check_shape_pipeline(n_actions=(4, 6, 18)) -> CheckResult:
    for n in n_actions:
        stages = dict(shape_pipeline(make_qnet("attentive", n)))
        for shape, stage in EXPECTED_ATTENTIVE_PIPELINE + [((n,), "q")]:
            if stages.get(stage) != shape:
                return CheckResult("shape_pipeline", False, f"{stage}: {stages.get(stage)} != {shape}")
    return CheckResult("shape_pipeline", True, "4×84×84 → 64×7×7 → 49×64 → 50×128 → 128 → n_actions")


def baseline_closed_form(n_actions: int) -> int:
    conv = (4 * 8 * 8 + 1) * 32 + (32 * 4 * 4 + 1) * 64 + (64 * 3 * 3 + 1) * 64
    return conv + (3136 + 1) * 512 + (512 + 1) * n_actions


def attentive_closed_form(n_actions: int, cfg: AttentionConfig | None = None) -> int:
    cfg = cfg or AttentionConfig()
    d, hid = cfg.d_model, cfg.mlp_hidden
    conv = (4 * 8 * 8 + 1) * 32 + (32 * 4 * 4 + 1) * 64 + (64 * 3 * 3 + 1) * 64
    tokens = (64 + 1) * d + cfg.seq_len * d + d
    per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * hid + hid) + (hid * d + d)
    if cfg.linformer:
        per_layer += cfg.seq_len * cfg.linformer_k * (1 if cfg.tie_kv_projections else 2)
    return conv + tokens + cfg.n_layers * per_layer + 2 * d + (d + 1) * n_actions


def check_parameter_audit() -> CheckResult:
    counts = {}
    for n in range(1, 19):
        base = parameter_count(BaselineQNet(n))
        att = parameter_count(AttentiveQNet(n))
        if base != baseline_closed_form(n) or att != attentive_closed_form(n):
            return CheckResult("parameter_audit", False, f"count mismatch at n_actions={n}")
        if not att < base:
            return CheckResult("parameter_audit", False, f"attentive {att} >= baseline {base} at n_actions={n}")
        counts[n] = (att, base)
    att6, base6 = counts[6]
    return CheckResult("parameter_audit", True,
                       f"n_actions=6: attentive {att6:,} vs baseline {base6:,}",
                       {"attentive": att6, "baseline": base6})


def permutation_invariance_error(seed: int, n_perms: int = 4, identity_projections: bool = False,
                                 config: AttentionConfig | None = None) -> float:
    """Largest Q-value change when the 49 spatial feature positions are shuffled.

    Positional embeddings are zeroed and dropout is off. Learned Linformer
    projections weight sequence positions individually, so invariance is only
    exact with ``identity_projections`` (which needs ``linformer_k == 50``)
    or with the Linformer path disabled.
    """
    gen = torch.Generator().manual_seed(seed)
    if identity_projections:
        config = AttentionConfig(linformer_k=50)
    net = make_qnet("attentive", 6, config=config, seed=seed)
    with torch.no_grad():
        net.pos_embedding.zero_()
        if identity_projections:
            for layer in net.encoder.layers:
                layer.proj_k.copy_(torch.eye(50))
                layer.proj_v.copy_(torch.eye(50))
        obs = torch.rand((1, 4, 84, 84), generator=gen)
        feats = net.features(obs)
        ref = net.q_from_features(feats)
        worst = 0.0
        _, h, w = FEATURE_SHAPE
        for _ in range(n_perms):
            perm = torch.randperm(h * w, generator=gen)
            shuffled = feats.flatten(-2)[..., perm].reshape(feats.shape)
            worst = max(worst, float((net.q_from_features(shuffled) - ref).abs().max()))
    return worst


def check_permutation_invariance(seeds=range(3)) -> CheckResult:
    worst = max(permutation_invariance_error(s, identity_projections=True) for s in seeds)
    learned = max(permutation_invariance_error(s) for s in seeds)
    return CheckResult("permutation_invariance", worst < 1e-5,
                       f"identity projections: max abs diff {worst:.2e} "
                       f"(learned low-rank projections: {learned:.2e}, position-dependent)",
                       {"max_abs_diff": worst, "learned_projection_diff": learned})


def run_all(corrupt_conv_grad: bool = False) -> list[CheckResult]:
    if corrupt_conv_grad:
        tc.GRADIENT_FAULTS.add("conv2d")
    try:
        return [
            check_op_gradients(),
            check_network_gradients("baseline"),
            check_network_gradients("attentive"),
            check_linformer_equivalence(),
            check_shape_pipeline(),
            check_parameter_audit(),
            check_permutation_invariance(),
        ]
    finally:
        tc.GRADIENT_FAULTS.discard("conv2d")
