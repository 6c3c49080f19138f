"""The hybrid CNN-Transformer encoder-decoder with decoder-side U-GEMs.

Layout (``s`` indexes the four scales 1/2 .. 1/16):

* stem: 3x3 conv-BN-ReLU at full resolution (kept as the last skip)
* encoder stage s: stride-2 conv-BN-ReLU, then a CNN block and a
  Transformer block side by side; their outputs are summed
* decoder stage (deepest first): per branch, x2 bilinear upsample + 1x1
  projection, add the encoder skip, run the branch block, then U-GEM
* final: per-branch upsample to full resolution plus the stem skip, 1x1
  heads for each branch and a fused head over the concatenated features
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import Tensor, nn

from .core import (
    BatchNorm2d,
    ChannelLinear,
    Conv2d,
    LayerNorm2d,
    conv2d,
    gelu,
    init_parameters,
    new_param,
    relu,
    softmax_channel,
    upsample_bilinear,
)
from .deform import AttentionConfig, DeformableAttention, DeformConv2d, LocalAttention
from .errors import ConfigurationError, InputError
from .ugem import UGEM, coarse_predict

N_STAGES = 4


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    num_heads: tuple[int, ...] = (1, 2, 4, 8)
    classes: int = 2
    in_channels: int = 1
    use_cnn_branch: bool = True
    use_deformable: bool = True
    use_ugem: bool = True
    use_bds_loss: bool = True
    window: int = 7
    ref_downsample: int = 2
    offset_range: float = 0.25
    rel_pos_bias: bool = False
    mlp_ratio: int = 2
    init_seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.num_heads = tuple(int(h) for h in self.num_heads)

    def validate(self) -> None:
        if len(self.stage_channels) != N_STAGES or len(self.num_heads) != N_STAGES:
            raise ConfigurationError(f"exactly {N_STAGES} stage_channels and num_heads are required")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigurationError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        if self.stage_channels[0] < 1:
            raise ConfigurationError("stage_channels must be positive")
        if self.classes < 2:
            raise ConfigurationError("classes must be >= 2")
        for c, h in zip(self.stage_channels, self.num_heads):
            if h < 1 or c % h:
                raise ConfigurationError(f"stage width {c} not divisible by head count {h}")
        self.attention(0).validate()

    def attention(self, stage: int) -> AttentionConfig:
        return AttentionConfig(self.num_heads[stage], self.window, self.ref_downsample,
                               self.offset_range, self.rel_pos_bias)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["num_heads"] = list(self.num_heads)
        return d


@dataclass
class NetworkOutput:
    fused: Tensor
    branch_cnn: Optional[Tensor]
    branch_trans: Tensor
    # decoding order (deepest first); each entry (P_cnn or None, P_trans, scale denominator)
    intermediates: list[tuple[Optional[Tensor], Tensor, int]] = field(default_factory=list)


@dataclass
class EncoderOutput:
    pairs: list[tuple[Optional[Tensor], Tensor]]
    merged: list[Tensor]
    stem: Tensor


class ConvBNReLU(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        # no conv bias: BatchNorm's shift makes it redundant (its gradient is identically zero)
        self.conv = Conv2d(c_in, c_out, 3, stride=stride, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class CNNBlock(nn.Module):
    """Two (deformable) conv-BN-ReLU groups."""

    def __init__(self, channels: int, deformable: bool):
        super().__init__()
        self.conv1 = DeformConv2d(channels, channels, deformable=deformable, bias=False)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = DeformConv2d(channels, channels, deformable=deformable, bias=False)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))


class MLP(nn.Module):
    def __init__(self, channels: int, ratio: int):
        super().__init__()
        self.fc1 = ChannelLinear(channels, channels * ratio)
        self.fc2 = ChannelLinear(channels * ratio, channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Local attention then deformable attention, each pre-norm with an MLP."""

    def __init__(self, channels: int, cfg: AttentionConfig, deformable: bool, mlp_ratio: int):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.local = LocalAttention(channels, cfg)
        self.norm2 = LayerNorm2d(channels)
        self.mlp1 = MLP(channels, mlp_ratio)
        self.norm3 = LayerNorm2d(channels)
        self.deform = DeformableAttention(channels, cfg, deformable=deformable)
        self.norm4 = LayerNorm2d(channels)
        self.mlp2 = MLP(channels, mlp_ratio)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.local(self.norm1(x))
        x = x + self.mlp1(self.norm2(x))
        x = x + self.deform(self.norm3(x))
        return x + self.mlp2(self.norm4(x))


class Head(nn.Module):
    def __init__(self, channels: int, classes: int):
        super().__init__()
        self.weight = new_param(classes, channels, 1, 1)
        self.bias = new_param(classes, init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return coarse_predict(x, self.weight, self.bias)


class UpProject(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.proj = ChannelLinear(c_in, c_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(upsample_bilinear(x, 2))


class UGDNet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.stage_channels
        hybrid = cfg.use_cnn_branch
        d = cfg.use_deformable

        self.stem = ConvBNReLU(cfg.in_channels, ch[0])
        self.down = nn.ModuleList(ConvBNReLU(ch[max(s - 1, 0)], ch[s], stride=2) for s in range(N_STAGES))
        self.enc_trans = nn.ModuleList(
            TransformerBlock(ch[s], cfg.attention(s), d, cfg.mlp_ratio) for s in range(N_STAGES))
        self.dec_trans = nn.ModuleList(
            TransformerBlock(ch[s], cfg.attention(s), d, cfg.mlp_ratio) for s in range(N_STAGES))
        self.up_trans = nn.ModuleList(UpProject(ch[s + 1], ch[s]) for s in range(N_STAGES - 1))
        self.final_up_trans = UpProject(ch[0], ch[0])
        self.head_trans = Head(ch[0], cfg.classes)
        if hybrid:
            self.enc_cnn = nn.ModuleList(CNNBlock(ch[s], d) for s in range(N_STAGES))
            self.dec_cnn = nn.ModuleList(CNNBlock(ch[s], d) for s in range(N_STAGES))
            self.up_cnn = nn.ModuleList(UpProject(ch[s + 1], ch[s]) for s in range(N_STAGES - 1))
            self.final_up_cnn = UpProject(ch[0], ch[0])
            self.head_cnn = Head(ch[0], cfg.classes)
            self.ugem = nn.ModuleList(UGEM(ch[s], cfg.classes, enabled=cfg.use_ugem) for s in range(N_STAGES))
            fused_in = 2 * ch[0]
        else:
            self.stage_heads = nn.ModuleList(Head(ch[s], cfg.classes) for s in range(N_STAGES))
            fused_in = ch[0]
        # zero start: fused features are large and a random head saturates the softmax
        self.fuse_weight = new_param(cfg.classes, fused_in, 1, 1, init="zeros")
        self.fuse_bias = new_param(cfg.classes, init="zeros")
        init_parameters(self, cfg.init_seed)

    # ------------------------------------------------------------------

    def check_input(self, image: Tensor) -> None:
        if image.dim() != 4 or image.shape[1] != self.cfg.in_channels:
            raise ConfigurationError(
                f"image must be (B, {self.cfg.in_channels}, H, W), got {tuple(image.shape)}")
        h, w = image.shape[2:]
        if h % 16 or w % 16 or h == 0 or w == 0:
            raise ConfigurationError(f"input height/width must be positive multiples of 16, got {h}x{w}")

    def encode(self, image: Tensor) -> EncoderOutput:
        self.check_input(image)
        stem = self.stem(image)
        x = stem
        pairs, merged = [], []
        for s in range(N_STAGES):
            x = self.down[s](x)
            t = self.enc_trans[s](x)
            c = self.enc_cnn[s](x) if self.cfg.use_cnn_branch else None
            pairs.append((c, t))
            x = t if c is None else c + t
            merged.append(x)
        return EncoderOutput(pairs, merged, stem)

    def decode(self, enc: EncoderOutput) -> NetworkOutput:
        hybrid = self.cfg.use_cnn_branch
        full_h = enc.stem.shape[2]
        c = t = None
        intermediates = []
        for s in reversed(range(N_STAGES)):
            skip = enc.merged[s]
            if s == N_STAGES - 1:
                t_in = skip
                c_in = skip
            else:
                t_in = self.up_trans[s](t) + skip
                c_in = self.up_cnn[s](c) + skip if hybrid else None
            t = self.dec_trans[s](t_in)
            scale = full_h // t.shape[2]
            if hybrid:
                c = self.dec_cnn[s](c_in)
                g = self.ugem[s](c, t)
                c, t = g.enhanced_cnn, g.enhanced_trans
                intermediates.append((g.coarse_cnn, g.coarse_trans, scale))
            else:
                intermediates.append((None, self.stage_heads[s](t), scale))
        t_f = self.final_up_trans(t) + enc.stem
        p_trans = self.head_trans(t_f)
        if hybrid:
            c_f = self.final_up_cnn(c) + enc.stem
            p_cnn = self.head_cnn(c_f)
            fused = self.fuse_heads(c_f, t_f)
        else:
            p_cnn = None
            fused = softmax_channel(conv2d(t_f, self.fuse_weight, self.fuse_bias))
        return NetworkOutput(fused, p_cnn, p_trans, intermediates)

    def fuse_heads(self, f_cnn: Tensor, f_trans: Tensor) -> Tensor:
        """Concatenate both branches, 1x1 conv to class logits, softmax."""
        if f_cnn.shape != f_trans.shape:
            raise InputError(f"final branch features differ: {tuple(f_cnn.shape)} vs {tuple(f_trans.shape)}")
        return softmax_channel(conv2d(torch.cat([f_cnn, f_trans], dim=1), self.fuse_weight, self.fuse_bias))

    def forward(self, image: Tensor) -> NetworkOutput:
        return self.decode(self.encode(image))


def mask_from_probs(p: Tensor) -> Tensor:
    """Argmax over classes with ties going to class 0 (background)."""
    best = torch.zeros(p.shape[0], *p.shape[2:], dtype=torch.long, device=p.device)
    best_val = p[:, 0]
    for k in range(1, p.shape[1]):
        better = p[:, k] > best_val
        best = torch.where(better, torch.full_like(best, k), best)
        best_val = torch.where(better, p[:, k], best_val)
    return best


@torch.no_grad()
def predict(model: UGDNet, image: Tensor) -> Tensor:
    """Binary/label mask (B, H, W) from the fused prediction in eval mode."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        out = model(image.to(dtype))
    finally:
        model.train(was_training)
    return mask_from_probs(out.fused)
