import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ugdnet import metrics
from ugdnet.errors import InputError


def boundary_oracle(m):
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if m[i, j] and any(not (0 <= i + di < h and 0 <= j + dj < w) or not m[i + di, j + dj]
                               for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1))):
                pts.append((i, j))
    return pts


def distances_oracle(pred, gt, spacing=(1.0, 1.0)):
    """All-pairs boundary distances."""
    bp, bg = boundary_oracle(pred), boundary_oracle(gt)

    def directed(a, b):
        return [min(math.hypot((i - k) * spacing[0], (j - l) * spacing[1]) for k, l in b) for i, j in a]

    d_pg, d_gp = directed(bp, bg), directed(bg, bp)
    return max(max(d_pg), max(d_gp)), float(np.mean(d_pg)), float(np.mean(d_pg + d_gp))


def _random_pair(rng, h, w):
    def blob():
        m = np.zeros((h, w), bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx, r = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(1, max(h, w) / 3)
            yy, xx = np.mgrid[0:h, 0:w]
            m |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        if not m.any():
            m[rng.integers(h), rng.integers(w)] = True
        return m
    return blob(), blob()


def test_distances_match_brute_force(rng):
    for _ in range(30):
        h, w = rng.integers(4, 33, size=2)
        p, g = _random_pair(rng, h, w)
        spacing = tuple(rng.uniform(0.5, 2.0, size=2))
        got = metrics.surface_distances(p, g, spacing)
        np.testing.assert_allclose(got, distances_oracle(p, g, spacing), atol=1e-9)


def test_single_pixel_345():
    p = np.zeros((10, 10), np.uint8)
    g = np.zeros((10, 10), np.uint8)
    p[1, 1] = 1
    g[4, 5] = 1
    hd, asd, assd = metrics.surface_distances(p, g)
    assert hd == 5.0 and asd == 5.0 and assd == 5.0


def test_anisotropic_spacing():
    p = np.zeros((5, 5), np.uint8)
    g = np.zeros((5, 5), np.uint8)
    p[0, 0] = g[2, 0] = 1
    assert metrics.surface_distances(p, g, (1.5, 1.0))[0] == pytest.approx(3.0)


def test_empty_conventions():
    z = np.zeros((8, 6), np.uint8)
    one = z.copy()
    one[3, 3] = 1
    assert metrics.dsc(z, z) == 100.0
    assert metrics.surface_distances(z, z) == (0.0, 0.0, 0.0)
    case = metrics.evaluate_case(z, one)
    assert case.empty_flag and case.dsc == 0.0
    assert case.hd == case.asd == case.assd == pytest.approx(10.0)
    assert not metrics.evaluate_case(one, one).empty_flag


def test_dsc_sens_prec_counts():
    p = np.array([[1, 1, 0, 0]])
    g = np.array([[1, 0, 1, 1]])
    assert metrics.dsc(p, g) == pytest.approx(100 * 2 / 5)
    assert metrics.sens_prec(p, g) == pytest.approx((100 / 3, 50.0))


@given(st.integers(0, 10_000))
def test_identity_is_perfect(seed):
    rng = np.random.default_rng(seed)
    m, _ = _random_pair(rng, 16, 12)
    c = metrics.evaluate_case(m, m)
    assert (c.dsc, c.hd, c.asd, c.assd, c.sens, c.prec) == (100.0, 0.0, 0.0, 0.0, 100.0, 100.0)


@given(st.integers(0, 10_000))
def test_hd_symmetric_and_bounds_assd(seed):
    rng = np.random.default_rng(seed)
    p, g = _random_pair(rng, 12, 12)
    a, b = metrics.surface_distances(p, g), metrics.surface_distances(g, p)
    assert a[0] == pytest.approx(b[0]) and a[2] == pytest.approx(b[2])
    assert a[2] <= a[0] + 1e-12


def test_report_aggregate_and_errors():
    m = np.ones((4, 4), np.uint8)
    rep = metrics.evaluate([("a", m, m), ("b", np.zeros_like(m), m)])
    agg = rep.aggregate()
    assert agg["dsc"] == 50.0 and rep.n_empty == 1
    assert list(rep.cases[0].row()) == ["case_id", *metrics.METRIC_COLUMNS, "empty_flag"]
    with pytest.raises(InputError):
        metrics.dsc(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(InputError):
        metrics.surface_distances(m, m, (0.0, 1.0))
