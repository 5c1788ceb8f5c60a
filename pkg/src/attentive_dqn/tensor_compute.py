"""Tensor arithmetic used by the Q-networks.

Arrays are ``torch.Tensor`` values and gradients come from torch's reverse-mode
autograd. The math of each op (softmax, layer norm, GELU, dropout, Huber, Adam)
is written out here rather than delegated to ``torch.nn.functional`` so every
formula is visible and checkable against :func:`finite_difference_check`.

Training runs in float32; gradient verification runs in float64.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor
Parameter = torch.nn.Parameter


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid hyper-parameter values."""


# Names of ops whose backward pass is deliberately corrupted. Only the
# negative-control path of the verify command touches this.
GRADIENT_FAULTS: set[str] = set()


class RngState:
    """Seeded random stream shared by numpy and torch consumers.

    ``numpy`` draws come from a PCG64 generator; ``torch`` draws (dropout
    masks, initialisation) come from a CPU ``torch.Generator`` (MT19937)
    seeded from the same seed. Identical seeds give identical streams on the
    same build.
    """

    algorithm = "numpy PCG64 + torch CPU MT19937"

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.np = np.random.Generator(np.random.PCG64(self._seq))
        self.torch = torch.Generator(device="cpu")
        self.torch.manual_seed(int(self._seq.generate_state(1, dtype=np.uint64)[0] >> 1))

    def spawn(self, n: int) -> list["RngState"]:
        """Derive ``n`` independent child streams (deterministic in the seed)."""
        states = self._seq.spawn(n)
        return [RngState(int(s.generate_state(1, dtype=np.uint64)[0])) for s in states]

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed})"


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


class _ScaleGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, factor):
        ctx.factor = factor
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.factor, None


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is ``C_in×H×W`` or batched ``B×C_in×H×W``; ``kernels`` is
    ``C_out×C_in×kh×kw``. Output spatial size is ``floor((H-kh)/stride)+1``.
    """
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or kernels.dim() != 4:
        raise DimensionError(
            f"conv2d expects C×H×W or B×C×H×W input and 4-d kernels, got "
            f"{tuple(x.shape)} and {tuple(kernels.shape)}")
    _, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs kernels {tuple(kernels.shape)}")
    if kh > h or kw > w:
        raise DimensionError(
            f"conv2d kernel {kh}×{kw} larger than input {h}×{w}")
    if bias is not None and tuple(bias.shape) != (c_out,):
        raise DimensionError(f"conv2d bias shape {tuple(bias.shape)} != ({c_out},)")
    out = F.conv2d(x, kernels, bias, stride=stride)
    if "conv2d" in GRADIENT_FAULTS:
        out = _ScaleGrad.apply(out, 1.5)
    return out.squeeze(0) if unbatched else out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing dimension; ``weight`` is ``d_out×d_in``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input trailing dim {tuple(x.shape)} does not match weight {tuple(weight.shape)}")
    out = x @ weight.transpose(0, 1)
    if bias is not None:
        if tuple(bias.shape) != (weight.shape[0],):
            raise DimensionError(f"linear bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
        out = out + bias
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation with biased variance, then ``gain * x̂ + shift``."""
    d = x.shape[-1]
    if tuple(gain.shape) != (d,) or tuple(shift.shape) != (d,):
        raise DimensionError(
            f"layernorm affine shapes {tuple(gain.shape)}/{tuple(shift.shape)} do not match width {d}")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + shift


class _ReluMasks:
    """Activation patterns recorded at a base point and replayed under perturbation."""

    def __init__(self):
        self.mode: str | None = None
        self.masks: list[Tensor] = []
        self.pos = 0
        self.crossings = 0


_RELU_MASKS = _ReluMasks()


def relu(x: Tensor) -> Tensor:
    state = _RELU_MASKS
    if state.mode is None:
        return torch.clamp_min(x, 0.0)
    live = x > 0
    if state.mode == "record":
        state.masks.append(live)
        mask = live
    else:
        mask = state.masks[state.pos]
        state.pos += 1
        state.crossings += int((mask != live).sum())
    return x * mask.to(x.dtype)


_GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608...
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    return 0.5 * x * (1.0 + torch.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def dropout(x: Tensor, rate: float, rng: RngState | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    gen = rng.torch if rng is not None else None
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean Huber penalty: ½e² for |e| ≤ δ, δ(|e| − ½δ) beyond."""
    if pred.shape != target.shape:
        raise DimensionError(
            f"huber_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = pred - target
    abs_err = err.abs()
    quad = torch.clamp_max(abs_err, delta)
    lin = abs_err - quad
    return (0.5 * quad * quad + delta * lin).mean()


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def zero_grads(params: Iterable[Parameter]) -> None:
    """Set every gradient accumulator to exact zeros (never ``None``)."""
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            p.grad.zero_()


class Adam:
    """Adam with bias correction.

    Moment buffers live on the optimizer and persist across :meth:`step`
    calls. ``max_grad_norm`` (global L2 clipping) is off unless set.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, eps: float = 1.5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, max_grad_norm: float | None = None):
        self.params = list(params)
        if lr <= 0 or eps <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
            raise ConfigError("invalid Adam hyper-parameters")
        self.lr, self.eps, self.beta1, self.beta2 = lr, eps, beta1, beta2
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        zero_grads(self.params)

    @torch.no_grad()
    def step(self) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        if self.max_grad_norm is not None:
            total = torch.sqrt(sum((g * g).sum() for g in grads))
            scale = min(1.0, self.max_grad_norm / (float(total) + 1e-12))
            grads = [g * scale for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                            max_coords: int | None = None,
                            rng: np.random.Generator | None = None,
                            freeze_relu: bool = False, stats: dict | None = None) -> float:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``f`` closes over ``params`` (leaf tensors with ``requires_grad``). With
    ``max_coords`` set, that many coordinates per tensor are sampled with
    ``rng`` instead of checking every coordinate. Returns the largest relative
    error, using ``max(|analytic|, |numeric|, 1e-8)`` as denominator.

    ``freeze_relu`` holds every ReLU's activation pattern at its value at the
    base point while perturbing, so a pre-activation that crosses zero within
    ``±h`` does not bias the difference quotient. The number of such
    crossings is reported in ``stats["relu_crossings"]``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    if freeze_relu:
        _RELU_MASKS.mode, _RELU_MASKS.masks, _RELU_MASKS.crossings = "record", [], 0
        try:
            out = f()
        finally:
            _RELU_MASKS.mode = None
        evaluate = _replaying(f)
    else:
        out = f()
        evaluate = f
    if out.numel() != 1:
        raise DimensionError(f"f must return a scalar, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            if max_coords is None or max_coords >= n:
                coords = range(n)
            else:
                coords = rng.choice(n, size=max_coords, replace=False)
            a_flat = analytic.reshape(-1)
            for i in coords:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = evaluate().item()
                flat[i] = orig - h
                f_minus = evaluate().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = a_flat[i].item()
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
    if stats is not None:
        stats["relu_crossings"] = _RELU_MASKS.crossings if freeze_relu else None
    if freeze_relu:
        _RELU_MASKS.masks = []
    return worst


def _replaying(f):
    def run():
        _RELU_MASKS.mode, _RELU_MASKS.pos = "replay", 0
        try:
            return f()
        finally:
            _RELU_MASKS.mode = None
    return run


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ADQNCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(path: str | Path, named: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """Write a flat parameter checkpoint.

    Layout: 8-byte magic ``ADQNCKPT``, little-endian uint32 version, uint32
    header length, UTF-8 JSON header ``{"meta": ..., "params": [{"name",
    "shape", "dtype", "offset", "count"}...]}``, then each tensor's values in
    row-major order at ``offset`` bytes from the start of the data section.
    """
    entries, blobs, offset = [], [], 0
    for name, t in named.items():
        t = t.detach().cpu().contiguous()
        dtype = _DTYPES.get(t.dtype)
        if dtype is None:
            raise ConfigError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype,
                        "offset": offset, "count": t.numel()})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    body = memoryview(data)[16 + hlen:]
    out = {}
    for e in header["params"]:
        arr = np.frombuffer(body, dtype=e["dtype"], count=e["count"], offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.copy().reshape(e["shape"]))
    return out, header["meta"]
