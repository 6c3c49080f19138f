"""Boundary-sensitive deep supervision loss.

All region losses act on the foreground probability channel and are summed
over the whole batch before forming ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, InputError

DICE_EPS = 1.0
BDOU_SMOOTH = 1e-6
# Upper clamp on the boundary coefficient, as recommended by the BoundaryDoU authors.
BDOU_ALPHA_MAX = 0.8
DEFAULT_WEIGHTS = (0.1, 0.2, 0.5, 0.8, 1.0)


@dataclass
class LossWeights:
    w_c: tuple[float, ...] = DEFAULT_WEIGHTS
    w_t: tuple[float, ...] = DEFAULT_WEIGHTS

    def __post_init__(self):
        self.w_c = tuple(float(v) for v in self.w_c)
        self.w_t = tuple(float(v) for v in self.w_t)
        if len(self.w_c) != 5 or len(self.w_t) != 5:
            raise ConfigurationError(f"need 5 weights per branch, got {len(self.w_c)} and {len(self.w_t)}")
        if min(self.w_c + self.w_t) < 0:
            raise ConfigurationError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    total: Tensor
    l_ds: float
    l_seg: float
    dice: float
    bdou_final: float
    terms: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        return {"total": float(self.total.detach()), "l_ds": self.l_ds, "l_seg": self.l_seg,
                "dice": self.dice, "bdou_final": self.bdou_final}


def _as_map(t: Tensor) -> Tensor:
    # accept (B, H, W) or (B, 1, H, W)
    if t.dim() == 4:
        if t.shape[1] != 1:
            raise InputError(f"expected a single-channel map, got {tuple(t.shape)}")
        return t[:, 0]
    if t.dim() != 3:
        raise InputError(f"expected (B, H, W) map, got {tuple(t.shape)}")
    return t


def _pair(p: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    p, y = _as_map(p), _as_map(y)
    if p.shape != y.shape:
        raise InputError(f"prediction {tuple(p.shape)} and target {tuple(y.shape)} differ in shape")
    return p, y.to(p.dtype)


def dice_loss(p: Tensor, y: Tensor, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps)."""
    p, y = _pair(p, y)
    inter = (p * y).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + y.sum() + eps)


def boundary_pixels(y: Tensor) -> Tensor:
    """Foreground pixels with at least one background 4-neighbor (outside counts as background)."""
    y = _as_map(y)
    fg = (y > 0.5).to(torch.float64)
    cross = torch.tensor([[0.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    count = F.conv2d(fg.unsqueeze(1), cross.view(1, 1, 3, 3), padding=1)[:, 0]
    return (fg > 0) & (count < 5)


def boundary_alpha(y: Tensor, alpha_max: float = BDOU_ALPHA_MAX) -> Tensor:
    """alpha = 1 - 2 * (#boundary / #foreground), clamped to [0, alpha_max]."""
    y = _as_map(y)
    n_boundary = boundary_pixels(y).sum().to(torch.float64)
    area = (y > 0.5).sum().to(torch.float64)
    smooth = 1e-5
    alpha = 1.0 - 2.0 * (n_boundary + smooth) / (area + smooth)
    return alpha.clamp(0.0, alpha_max)


def boundary_dou_loss(p: Tensor, y: Tensor, alpha: Optional[float | Tensor] = None,
                      smooth: float = BDOU_SMOOTH) -> Tensor:
    """Boundary Difference-over-Union.

    With I = sum(p y) and U = sum(p^2) + sum(y^2) - I the loss is
    (U - I) / max(U - alpha I, smooth).  ``alpha`` defaults to the value
    derived from the target's boundary-to-area ratio; alpha = 0 gives
    1 - soft IoU exactly.
    """
    p, y = _pair(p, y)
    if alpha is None:
        alpha = boundary_alpha(y)
    alpha = torch.as_tensor(alpha, dtype=p.dtype)
    inter = (p * y).sum()
    union = (p * p).sum() + (y * y).sum() - inter
    # U - alpha I >= (1 - alpha) I >= 0 and vanishes only when p and y are both
    # empty, so a floor (not an additive term) is enough to guard it.
    return (union - inter) / (union - alpha * inter).clamp_min(smooth)


def resize_target(y: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbor resize of a (B, H, W) target."""
    y = _as_map(y)
    if tuple(y.shape[1:]) == tuple(size):
        return y
    return F.interpolate(y.unsqueeze(1).to(torch.float64), size=size, mode="nearest")[:, 0].to(y.dtype)


def _fg(p: Tensor) -> Tensor:
    return p[:, 1] if p.dim() == 4 and p.shape[1] > 1 else _as_map(p)


def deep_supervision_loss(
    intermediates: Sequence[tuple[Optional[Tensor], Optional[Tensor]]],
    finals: tuple[Optional[Tensor], Optional[Tensor]],
    y: Tensor,
    weights: LossWeights | None = None,
    terms: Optional[dict] = None,
) -> Tensor:
    """Weighted BoundaryDoU over 4 intermediate pairs and the 2 branch finals.

    Predictions are class-probability maps (B, C, h, w); the target is
    resized to each prediction's resolution.  ``None`` predictions (absent
    branch) contribute nothing.
    """
    weights = weights or LossWeights()
    if len(intermediates) != 4:
        raise ConfigurationError(f"expected 4 intermediate prediction pairs, got {len(intermediates)}")
    y = _as_map(y)
    total = None
    pairs = list(intermediates) + [finals]
    for i, pair in enumerate(pairs):
        for branch, pred, w in (("cnn", pair[0], weights.w_c[i]), ("trans", pair[1], weights.w_t[i])):
            if pred is None:
                continue
            fg = _fg(pred)
            term = boundary_dou_loss(fg, resize_target(y, tuple(fg.shape[-2:])))
            if terms is not None:
                key = f"bdou_{branch}_{i + 1 if i < 4 else 'f'}"
                terms[key] = float(term.detach())
            total = w * term if total is None else total + w * term
    if total is None:
        return torch.zeros((), dtype=y.dtype if y.is_floating_point() else torch.float64)
    return total


def total_loss(out, y: Tensor, weights: LossWeights | None = None, use_bds: bool = True) -> LossBreakdown:
    """L_DS + Dice(P, Y) + BDoU(P, Y) on the fused output; L_DS dropped when ``use_bds`` is off."""
    y = _as_map(y)
    fused_fg = _fg(out.fused)
    d = dice_loss(fused_fg, y)
    b = boundary_dou_loss(fused_fg, y)
    l_seg = d + b
    terms: dict[str, float] = {"dice": float(d.detach()), "bdou_fused": float(b.detach())}
    if use_bds:
        inter = [(p_c, p_t) for p_c, p_t, *_ in out.intermediates]
        l_ds = deep_supervision_loss(inter, (out.branch_cnn, out.branch_trans), y, weights, terms)
        total = l_ds + l_seg
    else:
        l_ds = torch.zeros((), dtype=l_seg.dtype)
        total = l_seg
    return LossBreakdown(total, float(l_ds.detach()), float(l_seg.detach()), terms["dice"], terms["bdou_fused"], terms)
