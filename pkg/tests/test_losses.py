import pytest
import torch
from hypothesis import given, strategies as st

from ugdnet import losses
from ugdnet.errors import ConfigurationError, InputError
from ugdnet.network import NetworkConfig, NetworkOutput, UGDNet


def alpha_oracle(y):
    """Boundary pixels by explicit 4-neighbor scan (outside is background)."""
    b, h, w = y.shape
    n_boundary = 0
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                if not y[bi, i, j]:
                    continue
                for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ii, jj = i + di, j + dj
                    if not (0 <= ii < h and 0 <= jj < w) or not y[bi, ii, jj]:
                        n_boundary += 1
                        break
    area = y.sum()
    return min(max(1 - 2 * (n_boundary + 1e-5) / (area + 1e-5), 0.0), 0.8)


def bdou_oracle(p, y):
    a = alpha_oracle(y)
    inter = (p * y).sum()
    union = (p * p).sum() + (y * y).sum() - inter
    return (union - inter) / max(union - a * inter, 1e-6)


def _mask(g, *shape, q=0.5):
    return (torch.rand(*shape, generator=g) > q).to(torch.float64)


def test_losses_vanish_on_perfect_prediction(gen):
    y = _mask(gen, 2, 16, 16)
    assert losses.dice_loss(y, y).item() == pytest.approx(0.0, abs=1e-12)
    assert losses.boundary_dou_loss(y, y).item() == pytest.approx(0.0, abs=1e-12)
    probs = torch.stack([1 - y, y], dim=1)
    inter = [(torch.stack([1 - t, t], 1), torch.stack([1 - t, t], 1), s)
             for s in (16, 8, 4, 2) for t in [losses.resize_target(y, (16 // s, 16 // s))]]
    out = NetworkOutput(probs, probs, probs, inter)
    assert losses.total_loss(out, y).total.item() == pytest.approx(0.0, abs=1e-9)


def test_dice_hand_value():
    p = torch.tensor([[[0.5, 1.0], [0.0, 0.25]]], dtype=torch.float64)
    y = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]], dtype=torch.float64)
    # 1 - (2*1.5 + 1) / (1.75 + 2 + 1)
    assert losses.dice_loss(p, y).item() == pytest.approx(1 - 4 / 4.75, abs=1e-15)


@given(st.integers(0, 1_000_000))
def test_bdou_alpha_zero_is_one_minus_soft_iou(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.rand(2, 8, 8, generator=g, dtype=torch.float64)
    y = _mask(g, 2, 8, 8)
    inter = (p * y).sum()
    soft_iou = inter / ((p * p).sum() + (y * y).sum() - inter)
    assert abs(losses.boundary_dou_loss(p, y, alpha=0.0).item() - (1 - soft_iou.item())) <= 1e-9


@given(st.integers(0, 1_000_000), st.floats(0.0, 0.95))
def test_bdou_matches_oracle_and_alpha(seed, q):
    g = torch.Generator().manual_seed(seed)
    y = _mask(g, 2, 9, 7, q=q)
    p = torch.rand(2, 9, 7, generator=g, dtype=torch.float64)
    assert losses.boundary_alpha(y).item() == pytest.approx(alpha_oracle(y.numpy() > 0.5), abs=1e-12)
    assert losses.boundary_dou_loss(p, y).item() == pytest.approx(bdou_oracle(p.numpy(), y.numpy()), abs=1e-12)


def test_alpha_for_a_solid_square():
    y = torch.zeros(1, 10, 10, dtype=torch.float64)
    y[0, 2:8, 2:8] = 1  # 36 pixels, 20 on the boundary
    assert losses.boundary_alpha(y).item() == pytest.approx(0.0, abs=1e-6)  # 1 - 40/36 clamps to 0
    y = torch.zeros(1, 30, 30, dtype=torch.float64)
    y[0, 5:25, 5:25] = 1  # 400 pixels, 76 on the boundary
    assert losses.boundary_alpha(y).item() == pytest.approx(1 - 2 * 76 / 400, abs=1e-6)


def test_deep_supervision_equals_hand_expanded_sum(gen):
    net = UGDNet(NetworkConfig(stage_channels=(4, 8, 12, 16), num_heads=(1, 1, 1, 1), window=3))
    with torch.no_grad():
        for p in net.parameters():  # random heads so every term differs
            p.add_(torch.randn(p.shape, generator=gen) * 0.3)
    net.double()
    y = _mask(gen, 2, 32, 32)
    out = net(torch.rand(2, 1, 32, 32, generator=gen, dtype=torch.float64))
    w = (0.1, 0.2, 0.5, 0.8, 1.0)
    preds = [(c, t) for c, t, _ in out.intermediates] + [(out.branch_cnn, out.branch_trans)]
    expected = 0.0
    for i, (p_c, p_t) in enumerate(preds):
        for p in (p_c, p_t):
            size = p.shape[-1]
            yy = y[:, ::32 // size, ::32 // size]  # nearest downsampling of an even grid
            expected += w[i] * bdou_oracle(p[:, 1].detach().numpy(), yy.numpy())
    terms = {}
    got = losses.deep_supervision_loss(preds[:4], preds[4], y, losses.LossWeights(w, w), terms)
    assert len(terms) == 10
    assert abs(got.item() - expected) <= 1e-12


def test_total_loss_composition(gen):
    net = UGDNet(NetworkConfig(stage_channels=(4, 8, 12, 16), num_heads=(1, 1, 1, 1), window=3)).double()
    y = _mask(gen, 1, 16, 16)
    out = net(torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64))
    full = losses.total_loss(out, y)
    assert full.total.item() == pytest.approx(full.l_ds + full.l_seg, abs=1e-12)
    assert full.l_seg == pytest.approx(full.dice + full.bdou_final, abs=1e-12)
    no_bds = losses.total_loss(out, y, use_bds=False)
    assert no_bds.l_ds == 0.0 and no_bds.total.item() == pytest.approx(full.l_seg, abs=1e-12)


def test_weights_validation_and_shape_errors():
    with pytest.raises(ConfigurationError):
        losses.LossWeights((0.1, 0.2, 0.5, 0.8))
    with pytest.raises(ConfigurationError):
        losses.LossWeights(w_t=(0.1, 0.2, 0.5, 0.8, -1.0))
    with pytest.raises(InputError):
        losses.dice_loss(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))


def test_resize_target_nearest():
    y = torch.arange(16, dtype=torch.float64).view(1, 4, 4)
    assert losses.resize_target(y, (2, 2)).tolist() == [[[0.0, 2.0], [8.0, 10.0]]]
