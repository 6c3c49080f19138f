"""Deformable feature modeling: bilinear sampling, deformable convolution,
neighborhood (local) attention and deformable attention.

Coordinates are in pixel units with pixel centers on integers, so sampling
at ``(i, j)`` returns ``x[..., i, j]`` exactly.  Samples outside the map read
zeros, the same convention as zero-padded convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import (
    _check_feature_map,
    _cols_matmul,
    channel_linear,
    conv2d,
    conv_output_size,
    gelu,
    new_param,
)
from .errors import ConfigurationError, InputError, NonFiniteError

__all__ = [
    "AttentionConfig",
    "bilinear_sample",
    "deformable_conv2d",
    "local_attention",
    "deformable_attention",
    "reference_grid",
    "DeformConv2d",
    "LocalAttention",
    "DeformableAttention",
]


@dataclass
class AttentionConfig:
    num_heads: int = 1
    window: int = 7
    ref_downsample: int = 2
    offset_range: float = 0.25
    rel_pos_bias: bool = False

    def head_dim(self, channels: int) -> int:
        if channels % self.num_heads:
            raise ConfigurationError(f"channels {channels} not divisible by num_heads {self.num_heads}")
        return channels // self.num_heads

    def validate(self) -> None:
        if self.num_heads < 1:
            raise ConfigurationError("num_heads must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError(f"window must be odd and >= 1, got {self.window}")
        if self.ref_downsample < 1:
            raise ConfigurationError("ref_downsample must be >= 1")
        if self.offset_range < 0:
            raise ConfigurationError("offset_range must be nonnegative")


def bilinear_sample(x: Tensor, points: Tensor) -> Tensor:
    """Sample ``x`` (B, C, H, W) at continuous ``points`` (B, *S, 2) of (row, col).

    Returns (B, C, *S).  Differentiable in both ``x`` and ``points``.
    """
    _check_feature_map(x)
    if points.dim() < 2 or points.shape[-1] != 2 or points.shape[0] != x.shape[0]:
        raise InputError(f"points must have shape (B, ..., 2) with B={x.shape[0]}, got {tuple(points.shape)}")
    if not torch.isfinite(points).all():
        raise NonFiniteError("sampling points contain non-finite coordinates")
    b, c, h, w = x.shape
    sample_shape = points.shape[1:-1]
    pts = points.reshape(b, -1, 2)
    rows, cols = pts[..., 0], pts[..., 1]
    r0 = torch.floor(rows.detach())
    c0 = torch.floor(cols.detach())
    dr = rows - r0
    dc = cols - c0
    r0 = r0.long()
    c0 = c0.long()
    flat = x.reshape(b, c, h * w)
    out = None
    for oi, oj, wgt in (
        (0, 0, (1 - dr) * (1 - dc)),
        (0, 1, (1 - dr) * dc),
        (1, 0, dr * (1 - dc)),
        (1, 1, dr * dc),
    ):
        ri = r0 + oi
        ci = c0 + oj
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        idx = (ri.clamp(0, h - 1) * w + ci.clamp(0, w - 1)).unsqueeze(1).expand(b, c, -1)
        vals = torch.gather(flat, 2, idx)
        term = vals * (wgt * valid.to(wgt.dtype)).unsqueeze(1)
        out = term if out is None else out + term
    return out.reshape(b, c, *sample_shape)


def _tap_grid(k: int, out_h: int, out_w: int, stride: int, padding: int, like: Tensor) -> Tensor:
    # (K, out_h, out_w, 2) undeformed sampling positions in row-major tap order.
    taps = torch.arange(k, dtype=like.dtype, device=like.device) - padding
    oi = torch.arange(out_h, dtype=like.dtype, device=like.device) * stride
    oj = torch.arange(out_w, dtype=like.dtype, device=like.device) * stride
    tr, tc = torch.meshgrid(taps, taps, indexing="ij")
    rows = tr.reshape(-1, 1, 1) + oi.view(1, -1, 1)
    cols = tc.reshape(-1, 1, 1) + oj.view(1, 1, -1)
    return torch.stack(torch.broadcast_tensors(rows, cols), dim=-1)


def deformable_conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor],
    offsets: Tensor,
    stride: int = 1,
    padding: Optional[int] = None,
) -> Tensor:
    """y(p0) = sum_n w_n * x(p0 + p_n + offset_n(p0)), bilinear sampling.

    ``offsets`` is (B, 2K, H_out, W_out) holding (d_row, d_col) per tap, taps
    in row-major kernel order.
    """
    _check_feature_map(x)
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"deformable kernel must be square and odd, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ConfigurationError(f"input channels: x has {x.shape[1]}, kernel expects {c_in}")
    k = kh
    n_taps = k * k
    if padding is None:
        padding = k // 2
    out_h = conv_output_size(x.shape[2], k, stride, padding)
    out_w = conv_output_size(x.shape[3], k, stride, padding)
    if offsets.dim() != 4 or offsets.shape[1] != 2 * n_taps:
        raise ConfigurationError(
            f"offset field has {offsets.shape[1] if offsets.dim() == 4 else '?'} channels, "
            f"kernel {k}x{k} needs 2*K = {2 * n_taps}"
        )
    if offsets.shape[0] != x.shape[0] or tuple(offsets.shape[2:]) != (out_h, out_w):
        raise ConfigurationError(f"offset field shape {tuple(offsets.shape)} does not match output {(out_h, out_w)}")
    b = x.shape[0]
    base = _tap_grid(k, out_h, out_w, stride, padding, x)
    disp = offsets.reshape(b, n_taps, 2, out_h, out_w).permute(0, 1, 3, 4, 2)
    points = base.unsqueeze(0) + disp
    sampled = bilinear_sample(x, points)  # (B, C, K, out_h, out_w)
    cols = sampled.reshape(b, c_in * n_taps, out_h * out_w)
    return _cols_matmul(cols, kernel, bias, out_h, out_w)


# --------------------------------------------------------------------------
# attention


def _window_starts(n: int, window: int, device) -> Tensor:
    return (torch.arange(n, device=device) - window // 2).clamp(0, n - window)


def local_attention(
    x: Tensor,
    cfg: AttentionConfig,
    qkv_weight: Tensor,
    qkv_bias: Tensor,
    proj_weight: Tensor,
    proj_bias: Tensor,
    rpb: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """Neighborhood attention over a ``window x window`` patch per query.

    Windows are clamped at the borders so every query sees exactly
    ``window**2`` keys.  ``rpb`` is an optional (heads, 2w-1, 2w-1) relative
    position bias.  With ``return_weights`` the (B, heads, w*w, H, W) softmax
    weights are returned as well.
    """
    _check_feature_map(x)
    cfg.validate()
    b, c, h, w = x.shape
    win = cfg.window
    if win > h or win > w:
        raise ConfigurationError(f"window {win} larger than feature map {h}x{w}")
    heads = cfg.num_heads
    d = cfg.head_dim(c)
    qkv = channel_linear(x, qkv_weight, qkv_bias)
    q, k, v = qkv.split(c, dim=1)

    ri = _window_starts(h, win, x.device)
    cj = _window_starts(w, win, x.device)
    r = win // 2

    def neighborhoods(t: Tensor) -> Tensor:
        # Windows at every valid start, then replicate the edge starts: query i
        # uses start clamp(i - r, 0, H - win), which is exactly replicate padding by r.
        unf = F.unfold(t, win).view(b, c * win * win, h - win + 1, w - win + 1)
        if r:
            unf = F.pad(unf, (r, r, r, r), mode="replicate")
        return unf.reshape(b, heads, d, win * win, h * w)

    k_nb = neighborhoods(k)
    v_nb = neighborhoods(v)
    q = q.reshape(b, heads, d, 1, h * w)
    logits = (q * k_nb).sum(dim=2) / math.sqrt(d)  # (B, heads, w*w, HW)
    if rpb is not None:
        a = torch.arange(win, device=x.device)
        rel_r = (ri.view(-1, 1) + a.view(1, -1)) - torch.arange(h, device=x.device).view(-1, 1) + win - 1
        rel_c = (cj.view(-1, 1) + a.view(1, -1)) - torch.arange(w, device=x.device).view(-1, 1) + win - 1
        # (H, W, win, win) index pairs into the bias table
        bias = rpb[:, rel_r.view(h, 1, win, 1), rel_c.view(1, w, 1, win)]  # (heads, H, W, win, win)
        logits = logits + bias.permute(0, 3, 4, 1, 2).reshape(1, heads, win * win, h * w)
    attn = torch.softmax(logits, dim=2)
    out = (attn.unsqueeze(2) * v_nb).sum(dim=3).reshape(b, c, h, w)
    out = channel_linear(out, proj_weight, proj_bias)
    if return_weights:
        return out, attn.reshape(b, heads, win * win, h, w)
    return out


def reference_grid(h: int, w: int, factor: int, like: Tensor) -> Tensor:
    """Uniform (ceil(h/f), ceil(w/f), 2) grid of cell-center (row, col) points."""
    hr = -(-h // factor)
    wr = -(-w // factor)
    if hr < 1 or wr < 1:
        raise ConfigurationError("reference grid is empty")
    rows = (torch.arange(hr, dtype=like.dtype, device=like.device) + 0.5) * (h / hr) - 0.5
    cols = (torch.arange(wr, dtype=like.dtype, device=like.device) + 0.5) * (w / wr) - 0.5
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([rr, cc], dim=-1)


def deformable_attention(
    x: Tensor,
    cfg: AttentionConfig,
    params: Mapping[str, Tensor],
    return_weights: bool = False,
):
    """Attention whose keys/values are sampled at displaced reference points.

    ``params`` holds ``q_weight/q_bias``, ``k_weight/k_bias``,
    ``v_weight/v_bias``, ``proj_weight/proj_bias`` (all (C_out, C_in) and
    (C_out,)).  If ``offset_conv_weight/offset_conv_bias`` (C, C, k, k) and
    ``offset_out_weight/offset_out_bias`` (2, C) are present, the offset
    sub-network conv(stride=factor) -> GELU -> linear predicts a
    displacement per reference point, bounded to +-offset_range * (H, W)
    by tanh.  Without them keys are read at the fixed reference points.
    Every query attends over the same set of sampled points.
    """
    _check_feature_map(x)
    cfg.validate()
    b, c, h, w = x.shape
    heads = cfg.num_heads
    d = cfg.head_dim(c)
    factor = cfg.ref_downsample
    q = channel_linear(x, params["q_weight"], params["q_bias"])
    ref = reference_grid(h, w, factor, x)  # (Hr, Wr, 2)
    hr, wr = ref.shape[:2]
    points = ref.unsqueeze(0).expand(b, hr, wr, 2)
    if "offset_conv_weight" in params:
        kk = params["offset_conv_weight"].shape[-1]
        hidden = gelu(conv2d(q, params["offset_conv_weight"], params["offset_conv_bias"], stride=factor, padding=kk // 2))
        if tuple(hidden.shape[2:]) != (hr, wr):
            raise ConfigurationError(f"offset network output {tuple(hidden.shape[2:])} != reference grid {(hr, wr)}")
        raw = channel_linear(hidden, params["offset_out_weight"], params["offset_out_bias"])  # (B, 2, Hr, Wr)
        limit = torch.tensor([h, w], dtype=x.dtype, device=x.device) * cfg.offset_range
        offsets = torch.tanh(raw.permute(0, 2, 3, 1)) * limit
        points = points + offsets
    sampled = bilinear_sample(x, points)  # (B, C, Hr, Wr)
    k = channel_linear(sampled, params["k_weight"], params["k_bias"]).reshape(b, heads, d, hr * wr)
    v = channel_linear(sampled, params["v_weight"], params["v_bias"]).reshape(b, heads, d, hr * wr)
    qh = q.reshape(b, heads, d, h * w)
    logits = torch.matmul(qh.transpose(2, 3), k) / math.sqrt(d)  # (B, heads, HW, Ns)
    attn = torch.softmax(logits, dim=-1)
    out = torch.matmul(attn, v.transpose(2, 3))  # (B, heads, HW, d)
    out = out.transpose(2, 3).reshape(b, c, h, w)
    out = channel_linear(out, params["proj_weight"], params["proj_bias"])
    if return_weights:
        return out, attn
    return out


# --------------------------------------------------------------------------
# modules


class DeformConv2d(nn.Module):
    """3x3 convolution whose taps are displaced by a learned offset field.

    With ``deformable=False`` it is a plain convolution; the offset
    predictor is zero-initialized, so both variants start out identical.
    """

    def __init__(self, c_in: int, c_out: int, k: int = 3, deformable: bool = True, bias: bool = True):
        super().__init__()
        self.k = k
        self.deformable = deformable
        self.weight = new_param(c_out, c_in, k, k)
        self.bias = new_param(c_out, init="zeros") if bias else None
        if deformable:
            self.offset_weight = new_param(2 * k * k, c_in, k, k, init="zeros")
            self.offset_bias = new_param(2 * k * k, init="zeros")

    def offsets(self, x: Tensor) -> Tensor:
        return conv2d(x, self.offset_weight, self.offset_bias, padding=self.k // 2)

    def forward(self, x: Tensor) -> Tensor:
        if not self.deformable:
            return conv2d(x, self.weight, self.bias, padding=self.k // 2)
        return deformable_conv2d(x, self.weight, self.bias, self.offsets(x))


class LocalAttention(nn.Module):
    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        cfg.validate()
        cfg.head_dim(channels)
        self.cfg = cfg
        self.qkv_weight = new_param(3 * channels, channels)
        self.qkv_bias = new_param(3 * channels, init="zeros")
        self.proj_weight = new_param(channels, channels)
        self.proj_bias = new_param(channels, init="zeros")
        if cfg.rel_pos_bias:
            self.rpb = new_param(cfg.num_heads, 2 * cfg.window - 1, 2 * cfg.window - 1, init="zeros")
        else:
            self.rpb = None

    def effective_config(self, h: int, w: int) -> AttentionConfig:
        # Deep stages can be smaller than the window: shrink to the largest odd size that fits.
        win = min(self.cfg.window, h, w)
        win -= 1 - win % 2
        if win == self.cfg.window:
            return self.cfg
        return AttentionConfig(self.cfg.num_heads, win, self.cfg.ref_downsample, self.cfg.offset_range, self.cfg.rel_pos_bias)

    def forward(self, x: Tensor, return_weights: bool = False):
        cfg = self.effective_config(x.shape[2], x.shape[3])
        rpb = self.rpb
        if rpb is not None and cfg.window != self.cfg.window:
            cut = self.cfg.window - cfg.window
            rpb = rpb[:, cut:-cut, cut:-cut]
        return local_attention(x, cfg, self.qkv_weight, self.qkv_bias, self.proj_weight, self.proj_bias,
                               rpb=rpb, return_weights=return_weights)


class DeformableAttention(nn.Module):
    """Keys/values sampled at content-adaptive points of a coarse grid.

    ``deformable=False`` drops the offset sub-network and reads the fixed
    reference grid, which is what the zero-initialized deformable variant
    computes before training.
    """

    def __init__(self, channels: int, cfg: AttentionConfig, deformable: bool = True):
        super().__init__()
        cfg.validate()
        cfg.head_dim(channels)
        self.cfg = cfg
        self.deformable = deformable
        for name in ("q", "k", "v", "proj"):
            setattr(self, f"{name}_weight", new_param(channels, channels))
            setattr(self, f"{name}_bias", new_param(channels, init="zeros"))
        if deformable:
            kk = 2 * (cfg.ref_downsample // 2) + 1
            self.offset_conv_weight = new_param(channels, channels, kk, kk)
            self.offset_conv_bias = new_param(channels, init="zeros")
            self.offset_out_weight = new_param(2, channels, init="zeros")
            self.offset_out_bias = new_param(2, init="zeros")

    def effective_config(self, h: int, w: int) -> AttentionConfig:
        factor = min(self.cfg.ref_downsample, h, w)
        if factor == self.cfg.ref_downsample:
            return self.cfg
        return AttentionConfig(self.cfg.num_heads, self.cfg.window, factor, self.cfg.offset_range, self.cfg.rel_pos_bias)

    def params(self, factor: int) -> dict[str, Tensor]:
        p = {name: t for name, t in self.named_parameters(recurse=False)}
        if self.deformable and factor != self.cfg.ref_downsample:
            # keep the offset conv output aligned with the shrunken grid
            kk = 2 * (factor // 2) + 1
            full = p["offset_conv_weight"].shape[-1]
            cut = (full - kk) // 2
            if cut:
                p["offset_conv_weight"] = p["offset_conv_weight"][:, :, cut:-cut, cut:-cut]
        return p

    def forward(self, x: Tensor, return_weights: bool = False):
        cfg = self.effective_config(x.shape[2], x.shape[3])
        return deformable_attention(x, cfg, self.params(cfg.ref_downsample), return_weights=return_weights)
