"""Finite-difference gradient suites behind ``ugdnet gradcheck``."""

from __future__ import annotations

from typing import Callable, Iterable

import torch

from . import core, deform, losses, ugem
from .deform import AttentionConfig
from .gradcheck import GradCheckReport, grad_check
from .network import CNNBlock, NetworkConfig, TransformerBlock, UGDNet

Item = tuple[str, GradCheckReport]
SCOPES = ("ops", "blocks", "network")


def _rand(gen: torch.Generator, *shape: int, lo: float = -1.0, hi: float = 1.0) -> torch.Tensor:
    return torch.rand(shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo


def _randomize(module: torch.nn.Module, seed: int, scale: float = 0.5) -> None:
    # Random values everywhere, including zero-initialized offset predictors,
    # so every path carries gradient.
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in module.named_parameters():
            p.copy_(_rand(gen, *p.shape) * scale)


def _attn_params(gen: torch.Generator, c: int, factor: int, deformable: bool = True) -> dict:
    p = {}
    for name in ("q", "k", "v", "proj"):
        p[f"{name}_weight"] = _rand(gen, c, c)
        p[f"{name}_bias"] = _rand(gen, c) * 0.1
    if deformable:
        kk = 2 * (factor // 2) + 1
        p["offset_conv_weight"] = _rand(gen, c, c, kk, kk) * 0.5
        p["offset_conv_bias"] = _rand(gen, c) * 0.1
        p["offset_out_weight"] = _rand(gen, 2, c)
        p["offset_out_bias"] = _rand(gen, 2) * 0.1
    return p


def ops_suite(seed: int = 0, tol: float = 1e-4) -> list[Item]:
    gen = torch.Generator().manual_seed(seed)
    items: list[Item] = []

    def check(name: str, fn: Callable, inputs: list, **kw) -> None:
        items.append((name, grad_check(fn, inputs=inputs, tolerance=tol, seed=seed, **kw)))

    x = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
    check("conv2d", lambda a, k, b: core.conv2d(a, k, b, padding=1),
          [x, _rand(gen, 3, 2, 3, 3), _rand(gen, 3)])
    check("conv2d_stride2", lambda a, k, b: core.conv2d(a, k, b, stride=2, padding=1),
          [torch.randn(1, 2, 6, 6, generator=gen, dtype=torch.float64), _rand(gen, 3, 2, 3, 3), _rand(gen, 3)])

    rm, rv = torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    xb = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    check("batch_norm_train", lambda a, s, t: core.batch_norm(a, s, t, rm.clone(), rv.clone(), True),
          [xb, _rand(gen, 3, lo=0.5, hi=1.5), _rand(gen, 3)])
    erm, erv = _rand(gen, 3) * 0.2, _rand(gen, 3, lo=0.5, hi=2.0)
    check("batch_norm_eval", lambda a, s, t: core.batch_norm(a, s, t, erm, erv, False),
          [xb, _rand(gen, 3, lo=0.5, hi=1.5), _rand(gen, 3)])
    check("relu", core.relu, [torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)])
    check("linear", core.linear, [torch.randn(5, 4, generator=gen, dtype=torch.float64), _rand(gen, 3, 4), _rand(gen, 3)])
    check("softmax_channel", core.softmax_channel, [torch.randn(2, 3, 3, 3, generator=gen, dtype=torch.float64)])
    check("layer_norm", core.layer_norm,
          [torch.randn(1, 4, 3, 3, generator=gen, dtype=torch.float64), _rand(gen, 4), _rand(gen, 4)])
    check("upsample_bilinear", core.upsample_bilinear, [torch.randn(1, 2, 3, 3, generator=gen, dtype=torch.float64)])

    pts = _rand(gen, 1, 7, 2, lo=-0.8, hi=4.8)
    check("bilinear_sample", deform.bilinear_sample,
          [torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64), pts])
    check("deformable_conv2d", deform.deformable_conv2d,
          [torch.randn(1, 2, 5, 5, generator=gen, dtype=torch.float64), _rand(gen, 3, 2, 3, 3), _rand(gen, 3),
           _rand(gen, 1, 18, 5, 5)])

    cfg = AttentionConfig(num_heads=2, window=3, rel_pos_bias=True)
    check("local_attention", lambda a, w1, b1, w2, b2, r: deform.local_attention(a, cfg, w1, b1, w2, b2, rpb=r),
          [torch.randn(1, 4, 5, 5, generator=gen, dtype=torch.float64), _rand(gen, 12, 4), _rand(gen, 12),
           _rand(gen, 4, 4), _rand(gen, 4), _rand(gen, 2, 5, 5)])

    dcfg = AttentionConfig(num_heads=2, ref_downsample=2, offset_range=0.25)
    names = sorted(_attn_params(torch.Generator().manual_seed(0), 4, 2))
    params = _attn_params(gen, 4, 2)
    check("deformable_attention",
          lambda a, *ps: deform.deformable_attention(a, dcfg, dict(zip(names, ps))),
          [torch.randn(1, 4, 6, 6, generator=gen, dtype=torch.float64)] + [params[n] for n in names],
          input_names=["x"] + names)

    probs = core.softmax_channel(torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64))
    check("entropy_uncertainty", ugem.entropy_uncertainty, [probs])
    check("gated_fuse", ugem.gated_fuse,
          [torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64),
           torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64), _rand(gen, 1, 1, 4, 4, lo=0.05, hi=0.95)])
    check("ugem_forward",
          lambda fc, ft, wc, bc, wt, bt: torch.cat(
              [ugem.ugem_forward(fc, ft, (wc, bc), (wt, bt)).enhanced_cnn,
               ugem.ugem_forward(fc, ft, (wc, bc), (wt, bt)).enhanced_trans], dim=1),
          [torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64),
           torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64),
           _rand(gen, 2, 3, 1, 1), _rand(gen, 2), _rand(gen, 2, 3, 1, 1), _rand(gen, 2)])

    y = (torch.rand(2, 6, 6, generator=gen) > 0.5).to(torch.float64)
    p = _rand(gen, 2, 6, 6, lo=0.05, hi=0.95)
    check("dice_loss", lambda a: losses.dice_loss(a, y), [p])
    check("boundary_dou_loss", lambda a: losses.boundary_dou_loss(a, y), [p])
    return items


def blocks_suite(seed: int = 0, tol: float = 1e-4) -> list[Item]:
    gen = torch.Generator().manual_seed(seed)
    items: list[Item] = []
    cnn = CNNBlock(3, deformable=True)
    _randomize(cnn, seed, 0.3)
    items.append(("cnn_block", grad_check(cnn, inputs=[torch.randn(2, 3, 5, 5, generator=gen, dtype=torch.float64)],
                                          module=cnn, tolerance=tol, seed=seed)))
    trans = TransformerBlock(4, AttentionConfig(num_heads=2, window=3), deformable=True, mlp_ratio=2)
    _randomize(trans, seed, 0.5)
    items.append(("transformer_block", grad_check(trans, inputs=[torch.randn(1, 4, 6, 6, generator=gen, dtype=torch.float64)],
                                                  module=trans, tolerance=tol, seed=seed)))
    gem = ugem.UGEM(3)
    _randomize(gem, seed, 1.0)
    items.append(("ugem_module", grad_check(
        lambda a, b: torch.cat([gem(a, b).enhanced_cnn, gem(a, b).enhanced_trans], dim=1),
        inputs=[torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64),
                torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)],
        module=gem, tolerance=tol, seed=seed)))
    return items


def network_suite(seed: int = 0, tol: float = 1e-3) -> list[Item]:
    """End-to-end loss gradient on a 16x16 input with tiny stages.

    Every parameter tensor and the input image are probed along one random
    direction each, which keeps five seeds inside the runtime budget.  A
    direction moves a whole tensor, so a step of 1e-5 can straddle a ReLU or
    sampling-floor kink somewhere in the map; 1e-6 is fixed up front instead.
    """
    gen = torch.Generator().manual_seed(seed)
    cfg = NetworkConfig(stage_channels=(2, 3, 4, 5), num_heads=(1, 1, 1, 1), window=3, mlp_ratio=1, init_seed=seed)
    net = UGDNet(cfg).double()
    _randomize(net, seed, 0.5)
    y = (torch.rand(2, 16, 16, generator=gen) > 0.5).to(torch.float64)
    image = torch.rand(2, 1, 16, 16, generator=gen, dtype=torch.float64)

    def loss(img):
        return losses.total_loss(net(img), y).total

    report = grad_check(loss, inputs=[image], module=net, tolerance=tol, seed=seed, directional=True,
                        step=1e-6, input_names=["image"])
    return [("network_total_loss", report)]


def run_scope(scope: str, seeds: Iterable[int] = (0,)) -> list[Item]:
    suite = {"ops": ops_suite, "blocks": blocks_suite, "network": network_suite}[scope]
    out = []
    for s in seeds:
        out.extend((f"{name}[seed={s}]", rep) for name, rep in suite(s))
    return out
