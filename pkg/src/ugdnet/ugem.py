"""Uncertainty-gated exchange between the CNN and Transformer branches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .core import conv2d, new_param, softmax_channel
from .errors import ConfigurationError, InputError

PROB_FLOOR = 1e-12


@dataclass
class UgemOutput:
    enhanced_cnn: Tensor
    enhanced_trans: Tensor
    coarse_cnn: Tensor
    coarse_trans: Tensor
    u_cnn: Tensor
    u_trans: Tensor


def coarse_predict(f: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 classifier head followed by a channel softmax."""
    if weight.shape[0] < 2:
        raise ConfigurationError(f"classifier head needs at least 2 classes, got {weight.shape[0]}")
    return softmax_channel(conv2d(f, weight, bias))


def entropy_uncertainty(p: Tensor) -> Tensor:
    """Per-pixel entropy of the class distribution divided by log(#classes).

    Returns (B, 1, H, W) in [0, 1]; 0 * log 0 is taken as 0.
    """
    n_classes = p.shape[1]
    if n_classes < 2:
        raise ConfigurationError("entropy needs at least 2 classes")
    plogp = torch.where(p > 0, p * torch.log(p.clamp(PROB_FLOOR, 1.0)), torch.zeros_like(p))
    u = -plogp.sum(dim=1, keepdim=True) / math.log(n_classes)
    return u.clamp(0.0, 1.0)


def gated_fuse(f_self: Tensor, f_other: Tensor, u_self: Tensor) -> Tensor:
    """(1 - u) * f_self + u * f_other, with u broadcast over channels."""
    if f_self.shape != f_other.shape:
        raise InputError(f"feature shapes differ: {tuple(f_self.shape)} vs {tuple(f_other.shape)}")
    if u_self.dim() != 4 or u_self.shape[1] != 1 or u_self.shape[2:] != f_self.shape[2:]:
        raise InputError(f"uncertainty map must be (B, 1, H, W) matching features, got {tuple(u_self.shape)}")
    # lerp is exact at u = 0, u = 1 and for f_self == f_other
    return torch.lerp(f_self, f_other, u_self.expand_as(f_self))


def ugem_forward(
    f_cnn: Tensor,
    f_trans: Tensor,
    head_cnn: tuple[Tensor, Tensor],
    head_trans: tuple[Tensor, Tensor],
    enabled: bool = True,
) -> UgemOutput:
    """Coarse predictions, uncertainty maps and both gated fusions.

    U_CNN gates the CNN update and U_Trans gates the Transformer update.
    With ``enabled=False`` the features pass through unchanged but the
    coarse maps are still produced for deep supervision.
    """
    if f_cnn.shape != f_trans.shape:
        raise InputError(f"branch shapes differ: {tuple(f_cnn.shape)} vs {tuple(f_trans.shape)}")
    p_cnn = coarse_predict(f_cnn, *head_cnn)
    p_trans = coarse_predict(f_trans, *head_trans)
    u_cnn = entropy_uncertainty(p_cnn)
    u_trans = entropy_uncertainty(p_trans)
    if enabled:
        new_cnn = gated_fuse(f_cnn, f_trans, u_cnn)
        new_trans = gated_fuse(f_trans, f_cnn, u_trans)
    else:
        new_cnn, new_trans = f_cnn, f_trans
    return UgemOutput(new_cnn, new_trans, p_cnn, p_trans, u_cnn, u_trans)


class UGEM(nn.Module):
    def __init__(self, channels: int, classes: int = 2, enabled: bool = True):
        super().__init__()
        if classes < 2:
            raise ConfigurationError("U-GEM needs at least 2 classes")
        self.enabled = enabled
        self.head_cnn_weight = new_param(classes, channels, 1, 1)
        self.head_cnn_bias = new_param(classes, init="zeros")
        self.head_trans_weight = new_param(classes, channels, 1, 1)
        self.head_trans_bias = new_param(classes, init="zeros")

    def forward(self, f_cnn: Tensor, f_trans: Tensor) -> UgemOutput:
        return ugem_forward(
            f_cnn,
            f_trans,
            (self.head_cnn_weight, self.head_cnn_bias),
            (self.head_trans_weight, self.head_trans_bias),
            enabled=self.enabled,
        )
