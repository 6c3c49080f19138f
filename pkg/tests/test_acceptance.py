"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

The training criteria (overfit, generalization) take tens of minutes on one
CPU core; they carry the ``slow`` marker and can be skipped with
``-m "not slow"``.
"""

import math
import time

import numpy as np
import pytest
import torch

from test_deform import _attn_params, grid_attention_oracle
from test_losses import bdou_oracle
from test_metrics import _random_pair, distances_oracle
from ugdnet import checkpoint, core, deform, losses, metrics, ugem
from ugdnet.checks import run_scope
from ugdnet.cli import preset_config, run_training
from ugdnet.config import RunConfig
from ugdnet.data import SynthSpec, split, synth_generate
from ugdnet.deform import AttentionConfig
from ugdnet.network import NetworkConfig, NetworkOutput, UGDNet
from ugdnet.trainer import TrainConfig, train

# Desk-scale optimizer settings shared by the training criteria.
DESK_LR = 0.003
DESK_BATCH = 4
DESK_CLIP = 10.0


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return emit


def test_gradient_suite(verdict):
    seeds = range(5)
    t0 = time.time()
    items = run_scope("ops", seeds) + run_scope("blocks", seeds) + run_scope("network", seeds)
    elapsed = time.time() - t0
    failed = [name for name, rep in items if not rep.passed]
    worst_op = max(rep.max_error for name, rep in items if not name.startswith("network"))
    worst_net = max(rep.max_error for name, rep in items if name.startswith("network"))
    ok = not failed and elapsed < 300
    verdict("gradient suite", ok, f"{len(items)} checks over 5 seeds, worst op {worst_op:.2e} (<1e-4), "
            f"network {worst_net:.2e} (<1e-3), {elapsed:.0f}s (<300s), failed {failed}")
    assert not failed
    assert elapsed < 300


def test_zero_offsets(verdict):
    conv_err = attn_err = 0.0
    for draw in range(20):
        g = torch.Generator().manual_seed(draw)
        k = (1, 3, 5)[draw % 3]
        stride = 1 + draw % 2
        x = torch.randn(2, 3, 9, 8, generator=g, dtype=torch.float64)
        w = torch.randn(4, 3, k, k, generator=g, dtype=torch.float64)
        b = torch.randn(4, generator=g, dtype=torch.float64)
        ref = core.conv2d(x, w, b, stride=stride, padding=k // 2)
        off = torch.zeros(2, 2 * k * k, *ref.shape[2:], dtype=torch.float64)
        got = deform.deformable_conv2d(x, w, b, off, stride=stride)
        conv_err = max(conv_err, (got - ref).abs().max().item())

        factor, heads = (1, 2, 3)[draw % 3], 1 + draw % 2
        p = _attn_params(g, 4, factor, zero_offsets=True)
        xa = torch.randn(1, 4, 5 + draw % 3, 6, generator=g, dtype=torch.float64)
        got = deform.deformable_attention(xa, AttentionConfig(num_heads=heads, ref_downsample=factor), p)
        want = grid_attention_oracle(xa.numpy(), heads, factor, {n: t.numpy() for n, t in p.items()})
        attn_err = max(attn_err, float(np.abs(got.numpy() - want).max()))
    ok = conv_err <= 1e-10 and attn_err <= 1e-8
    verdict("zero offsets", ok, f"deform conv vs conv {conv_err:.1e} (<=1e-10), "
            f"deform attention vs grid oracle {attn_err:.1e} (<=1e-8), 20 draws")
    assert conv_err <= 1e-10 and attn_err <= 1e-8


def _probs(values):
    return torch.tensor(values, dtype=torch.float64).view(1, -1, 1, 1)


def test_ugem_entropy_and_convexity(verdict):
    uniform = ugem.entropy_uncertainty(_probs([0.5, 0.5])).item()
    onehot = ugem.entropy_uncertainty(_probs([1.0, 0.0])).item()
    ref = ugem.entropy_uncertainty(_probs([0.9, 0.1])).item()
    outside = 0
    for draw in range(100):
        g = torch.Generator().manual_seed(draw)
        a = torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64)
        b = torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64)
        u = ugem.entropy_uncertainty(torch.softmax(torch.randn(2, 2, 6, 6, generator=g, dtype=torch.float64), 1))
        out = ugem.gated_fuse(a, b, u)
        outside += int(((out < torch.minimum(a, b)) | (out > torch.maximum(a, b))).any())
    ok = abs(uniform - 1) <= 1e-9 and abs(onehot) <= 1e-9 and abs(ref - 0.46900) <= 1e-5 and outside == 0
    verdict("U-GEM", ok, f"U(uniform)={uniform:.12f} U(one-hot)={onehot:.1e} U(0.9,0.1)={ref:.6f}, "
            f"{outside}/100 tensors outside the convex interval")
    assert ok


def test_losses(verdict):
    g = torch.Generator().manual_seed(7)
    y = (torch.rand(2, 16, 16, generator=g) > 0.5).to(torch.float64)
    probs = torch.stack([1 - y, y], 1)
    inter = []
    for s in (16, 8, 4, 2):
        t = losses.resize_target(y, (16 // s, 16 // s))
        inter.append((torch.stack([1 - t, t], 1), torch.stack([1 - t, t], 1), s))
    perfect = max(losses.dice_loss(y, y).item(), losses.boundary_dou_loss(y, y).item(),
                  losses.total_loss(NetworkOutput(probs, probs, probs, inter), y).total.item())

    identity = 0.0
    for draw in range(50):
        gd = torch.Generator().manual_seed(draw)
        p = torch.rand(2, 8, 8, generator=gd, dtype=torch.float64)
        t = (torch.rand(2, 8, 8, generator=gd) > 0.5).to(torch.float64)
        i = (p * t).sum()
        soft_iou = (i / ((p * p).sum() + (t * t).sum() - i)).item()
        identity = max(identity, abs(losses.boundary_dou_loss(p, t, alpha=0.0).item() - (1 - soft_iou)))

    net = UGDNet(NetworkConfig(stage_channels=(4, 8, 12, 16), num_heads=(1, 1, 1, 1), window=3))
    with torch.no_grad():
        for prm in net.parameters():
            prm.add_(torch.randn(prm.shape, generator=g) * 0.3)
    net.double()
    yt = (torch.rand(2, 32, 32, generator=g) > 0.5).to(torch.float64)
    out = net(torch.rand(2, 1, 32, 32, generator=g, dtype=torch.float64))
    w = (0.1, 0.2, 0.5, 0.8, 1.0)
    preds = [(c, t) for c, t, _ in out.intermediates] + [(out.branch_cnn, out.branch_trans)]
    expected = 0.0
    for weight, pair in zip(w, preds):
        for p in pair:
            step = 32 // p.shape[-1]
            expected += weight * bdou_oracle(p[:, 1].detach().numpy(), yt[:, ::step, ::step].numpy())
    terms = {}
    got = losses.deep_supervision_loss(preds[:4], preds[4], yt, losses.LossWeights(w, w), terms).item()
    ds_err = abs(got - expected)

    ok = perfect <= 1e-9 and identity <= 1e-9 and ds_err <= 1e-12 and len(terms) == 10
    verdict("losses", ok, f"perfect-prediction loss {perfect:.1e}, BDoU(alpha=0) vs 1-softIoU {identity:.1e} "
            f"(<=1e-9), deep supervision vs 10-term sum {ds_err:.1e} (<=1e-12)")
    assert ok


def test_metrics(verdict):
    rng = np.random.default_rng(11)
    err = 0.0
    for _ in range(100):
        h, w = rng.integers(4, 33, size=2)
        p, g = _random_pair(rng, h, w)
        got = metrics.surface_distances(p, g)
        err = max(err, float(np.abs(np.subtract(got, distances_oracle(p, g))).max()))
    a = np.zeros((10, 10), np.uint8)
    b = np.zeros((10, 10), np.uint8)
    a[1, 1], b[4, 5] = 1, 1
    hd345 = metrics.surface_distances(a, b)[0]
    empty = metrics.dsc(np.zeros((8, 8)), np.zeros((8, 8)))
    ok = err <= 1e-9 and hd345 == 5.0 and empty == 100.0
    verdict("metrics", ok, f"HD/ASD/ASSD vs all-pairs oracle {err:.1e} over 100 pairs, "
            f"3-4-5 HD={hd345}, both-empty DSC={empty}")
    assert ok


@pytest.mark.slow
def test_overfit(verdict):
    samples = synth_generate(SynthSpec(seed=1), 20)
    model = UGDNet(NetworkConfig(stage_channels=(16, 32, 64, 128)))
    t0 = time.time()
    cfg = TrainConfig(epochs=200, batch_size=DESK_BATCH, base_lr=DESK_LR, grad_clip=DESK_CLIP)
    res = train(cfg, samples, [], model)
    elapsed = time.time() - t0
    ok = res.best_val_dsc >= 99 and elapsed < 1800
    verdict("overfit", ok, f"training DSC {res.best_val_dsc:.2f} (>=99) at epoch {res.best_epoch} "
            f"of 200, {elapsed / 60:.1f} min (<30)")
    assert res.best_val_dsc >= 99
    assert elapsed < 1800


def _desk_config(seed: int) -> RunConfig:
    cfg = RunConfig()
    cfg.apply_seed(seed)
    cfg.data.synth = True
    cfg.data.synth_count = 200
    cfg.data.size = 64
    cfg.train.epochs = 60
    cfg.train.batch_size = DESK_BATCH
    cfg.train.base_lr = DESK_LR
    cfg.train.grad_clip = DESK_CLIP
    return cfg


@pytest.mark.slow
def test_generalization(verdict, tmp_path):
    seed = 0
    base = _desk_config(seed)
    samples = synth_generate(base.data.synth_spec, base.data.synth_count)
    t0 = time.time()
    full = run_training(preset_config(base, "H+D+U+B"), tmp_path / "full", samples)
    plain = run_training(preset_config(base, "Baseline"), tmp_path / "baseline", samples)
    elapsed = time.time() - t0
    ok = full["test_dsc"] >= 80 and full["test_dsc"] >= plain["test_dsc"] and elapsed < 7200
    verdict("generalization", ok, f"test DSC full {full['test_dsc']:.2f} (>=80), baseline "
            f"{plain['test_dsc']:.2f} (full >= baseline), seed {seed}, {elapsed / 60:.0f} min (<120)")
    assert full["test_dsc"] >= 80
    assert full["test_dsc"] >= plain["test_dsc"]
    assert elapsed < 7200


def test_determinism(verdict, tmp_path):
    samples = synth_generate(SynthSpec(seed=3).at_size(32), 10)
    manifests, losses_seen, blobs = [], [], []
    for run in range(2):
        out = tmp_path / f"run{run}"
        out.mkdir()
        split(samples, (7, 1, 2), 3, out / "split.txt")
        manifests.append((out / "split.txt").read_bytes())
        model = UGDNet(NetworkConfig(stage_channels=(4, 8, 12, 16), num_heads=(1, 1, 2, 2), window=3))
        res = train(TrainConfig(epochs=1, batch_size=2, base_lr=0.01, seed=3), samples[:6], [], model, out)
        losses_seen.append([res.history[0]["total"], res.history[1]["total"]])
        state, cfg, meta = checkpoint.read_checkpoint(res.last_path)
        reloaded = UGDNet(NetworkConfig(stage_channels=(4, 8, 12, 16), num_heads=(1, 1, 2, 2), window=3))
        checkpoint.load_state(reloaded, state)
        checkpoint.save_checkpoint(out / "resaved.ckpt", reloaded, cfg, meta)
        blobs.append(((out / "last.ckpt").read_bytes(), (out / "resaved.ckpt").read_bytes()))
    same_split = manifests[0] == manifests[1]
    same_loss = losses_seen[0] == losses_seen[1] and all(math.isfinite(v) for v in losses_seen[0])
    same_bytes = blobs[0][0] == blobs[0][1] == blobs[1][0] == blobs[1][1]
    ok = same_split and same_loss and same_bytes
    verdict("determinism", ok, f"split manifests identical={same_split}, step-0/1 losses "
            f"{losses_seen[0]} identical={same_loss}, checkpoints byte-identical={same_bytes}")
    assert ok
