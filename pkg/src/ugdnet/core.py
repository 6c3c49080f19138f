"""Differentiable tensor primitives and parameterized layers.

Every forward op works on ``torch.Tensor`` feature maps laid out as
``(batch, channels, height, width)``; gradients come from torch autograd.
Layers create their parameters without touching the global RNG, and
:func:`init_parameters` fills them from a generator seeded by
``(seed, parameter name)``.  Adding or removing a submodule therefore never
changes the initial values of unrelated parameters.
"""

from __future__ import annotations

import math
import zlib
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, InputError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

__all__ = [
    "conv2d",
    "batch_norm",
    "relu",
    "gelu",
    "softmax_channel",
    "layer_norm",
    "linear",
    "channel_linear",
    "matmul",
    "upsample_bilinear",
    "downsample",
    "backward",
    "Conv2d",
    "BatchNorm2d",
    "LayerNorm2d",
    "ChannelLinear",
    "new_param",
    "init_parameters",
]


def _check_feature_map(x: Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise InputError(f"{name} must be a 4-d feature map (B, C, H, W), got shape {tuple(x.shape)}")


def _cols_matmul(cols: Tensor, kernel: Tensor, bias: Optional[Tensor], out_h: int, out_w: int) -> Tensor:
    # cols: (B, C*K, L) in unfold layout (channel-major, then kernel taps).
    # Shared by conv2d and deformable_conv2d so zero offsets reproduce conv2d bit for bit.
    out = torch.matmul(kernel.reshape(kernel.shape[0], -1), cols.contiguous())
    if bias is not None:
        out = out + bias.view(1, -1, 1)
    return out.view(cols.shape[0], kernel.shape[0], out_h, out_w)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-d cross-correlation (im2col + matmul)."""
    _check_feature_map(x)
    if kernel.dim() != 4:
        raise ConfigurationError(f"kernel must be 4-d (out, in, kh, kw), got {tuple(kernel.shape)}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise ConfigurationError(f"input channels: x has {x.shape[1]}, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel spatial size must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ConfigurationError(f"bias length {tuple(bias.shape)} does not match out channels {c_out}")
    out_h = conv_output_size(x.shape[2], kh, stride, padding)
    out_w = conv_output_size(x.shape[3], kw, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"height/width {tuple(x.shape[2:])} too small for a {kh}x{kw} kernel")
    cols = F.unfold(x, (kh, kw), padding=padding, stride=stride)
    return _cols_matmul(cols, kernel, bias, out_h, out_w)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    buffers are updated in place (unbiased variance, like most frameworks).
    """
    _check_feature_map(x)
    c = x.shape[1]
    for name, t in (("scale", scale), ("shift", shift), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ConfigurationError(f"{name} has shape {tuple(t.shape)}, expected ({c},) for channel count {c}")
    if training:
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        n = x.numel() // c
        with torch.no_grad():
            unbiased = var * (n / max(n - 1, 1))
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            running_var.mul_(1 - momentum).add_(momentum * unbiased.detach())
    else:
        mean, var = running_mean, running_var
    inv = torch.rsqrt(var + eps)
    return (x - mean.view(1, c, 1, 1)) * (inv * scale).view(1, c, 1, 1) + shift.view(1, c, 1, 1)


def relu(x: Tensor) -> Tensor:
    return torch.clamp_min(x, 0.0)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax across the channel axis of a feature map, max-subtracted."""
    _check_feature_map(x)
    z = x - x.amax(dim=1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = BN_EPS) -> Tensor:
    """Normalize each spatial position over its channel vector."""
    _check_feature_map(x)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigurationError(f"layer_norm affine params must have shape ({c},)")
    mean = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, keepdim=True, unbiased=False)
    return (x - mean) * torch.rsqrt(var + eps) * scale.view(1, c, 1, 1) + shift.view(1, c, 1, 1)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = torch.matmul(x, weight.t())
    return out if bias is None else out + bias


def channel_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-position linear map over the channel axis of a feature map."""
    _check_feature_map(x)
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"channel_linear: input channels {x.shape[1]} != weight in-features {weight.shape[1]}")
    out = torch.einsum("oc,bchw->bohw", weight, x)
    return out if bias is None else out + bias.view(1, -1, 1, 1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul: inner dimensions {a.shape[-1]} and {b.shape[-2]} differ")
    return torch.matmul(a, b)


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    _check_feature_map(x)
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


def downsample(x: Tensor, factor: int = 2) -> Tensor:
    """Average-pool by ``factor`` (used for smoothing targets and tests)."""
    _check_feature_map(x)
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ConfigurationError(f"spatial size {tuple(x.shape[2:])} not divisible by {factor}")
    return F.avg_pool2d(x, factor)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(parameter) into every parameter's ``.grad``.

    Calling twice on the same recorded graph (with ``retain_graph=True``)
    adds the gradients, it does not overwrite them.
    """
    if not isinstance(loss, Tensor) or loss.numel() != 1:
        raise StateError("backward expects a scalar loss tensor")
    if loss.grad_fn is None and not loss.requires_grad:
        raise StateError("backward called before a forward pass recorded any computation")
    loss.backward(retain_graph=retain_graph)


# --------------------------------------------------------------------------
# parameters and layers


def new_param(*shape: int, init: str = "uniform", fan_in: int | None = None) -> nn.Parameter:
    """Allocate an uninitialized parameter tagged with its init rule."""
    p = nn.Parameter(torch.zeros(*shape))
    p.init_kind = init
    p.fan_in = fan_in if fan_in is not None else (int(math.prod(shape[1:])) if len(shape) > 1 else 1)
    return p


def _name_seed(seed: int, name: str) -> int:
    h = (seed * 0x9E3779B97F4A7C15 + zlib.crc32(name.encode())) & 0xFFFFFFFFFFFFFFFF
    h ^= h >> 31
    h = (h * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    return h & 0x7FFFFFFFFFFFFFFF


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fill every tagged parameter from a per-name seeded generator.

    ``uniform`` parameters are drawn from U(-b, b) with b = sqrt(6 / fan_in);
    ``zeros`` and ``ones`` are constant.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            kind = getattr(p, "init_kind", "uniform")
            if kind == "zeros":
                p.zero_()
            elif kind == "ones":
                p.fill_(1.0)
            elif kind == "uniform":
                gen = torch.Generator().manual_seed(_name_seed(seed, name))
                bound = math.sqrt(6.0 / max(p.fan_in, 1))
                draw = torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound
                p.copy_(draw.to(p.dtype))
            else:
                raise ConfigurationError(f"unknown init kind {kind!r} for {name}")


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2
        kind = "zeros" if zero_init else "uniform"
        self.weight = new_param(c_out, c_in, k, k, init=kind)
        self.bias = new_param(c_out, init="zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(nn.Module):
    def __init__(self, c: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = new_param(c, init="ones")
        self.bias = new_param(c, init="zeros")
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class LayerNorm2d(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.weight = new_param(c, init="ones")
        self.bias = new_param(c, init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class ChannelLinear(nn.Module):
    def __init__(self, c_in: int, c_out: int, zero_init: bool = False):
        super().__init__()
        self.weight = new_param(c_out, c_in, init="zeros" if zero_init else "uniform")
        self.bias = new_param(c_out, init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return channel_linear(x, self.weight, self.bias)
