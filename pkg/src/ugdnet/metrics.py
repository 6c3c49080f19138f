"""Segmentation metrics on binary 2-d masks (numpy)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import InputError

METRIC_COLUMNS = ("dsc", "hd", "asd", "assd", "sens", "prec")


def _binary(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise InputError(f"masks must be 2-d, got shape {a.shape}")
    return a > 0


def _same_shape(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise InputError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dsc(pred, gt) -> float:
    """Dice similarity coefficient in percent; 100 when both masks are empty."""
    p, g = _same_shape(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(p, g).sum() / denom


def sens_prec(pred, gt) -> tuple[float, float]:
    p, g = _same_shape(pred, gt)
    tp = int(np.logical_and(p, g).sum())
    fn = int(np.logical_and(~p, g).sum())
    fp = int(np.logical_and(p, ~g).sum())
    sens = 100.0 if tp + fn == 0 else 100.0 * tp / (tp + fn)
    prec = 100.0 if tp + fp == 0 else 100.0 * tp / (tp + fp)
    return sens, prec


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbor; outside the image is background."""
    m = _binary(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray, spacing: tuple[float, float]) -> np.ndarray:
    # distance from every src boundary pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def image_diagonal(shape: Sequence[int], spacing: tuple[float, float] = (1.0, 1.0)) -> float:
    return math.hypot(shape[0] * spacing[0], shape[1] * spacing[1])


def surface_distances(pred, gt, spacing: tuple[float, float] = (1.0, 1.0)) -> tuple[float, float, float]:
    """(HD, ASD, ASSD) between mask boundaries in physical units.

    ASD averages pred-boundary -> gt-boundary distances.  If exactly one
    mask is empty all three are the image diagonal; if both are empty they
    are 0.  Use :func:`evaluate_case` to also get the empty flag.
    """
    p, g = _same_shape(pred, gt)
    if spacing[0] <= 0 or spacing[1] <= 0:
        raise InputError(f"spacing must be positive, got {spacing}")
    if not p.any() and not g.any():
        return 0.0, 0.0, 0.0
    if not p.any() or not g.any():
        d = image_diagonal(p.shape, spacing)
        return d, d, d
    bp, bg = boundary(p), boundary(g)
    d_pg = _directed(bp, bg, spacing)
    d_gp = _directed(bg, bp, spacing)
    hd = float(max(d_pg.max(), d_gp.max()))
    asd = float(d_pg.mean())
    assd = float(np.concatenate([d_pg, d_gp]).mean())
    return hd, asd, assd


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    hd: float
    asd: float
    assd: float
    sens: float
    prec: float
    empty_flag: bool = False

    def row(self) -> dict:
        d = asdict(self)
        d["empty_flag"] = int(self.empty_flag)
        return d


def evaluate_case(pred, gt, spacing: tuple[float, float] = (1.0, 1.0), case_id: str = "") -> CaseMetrics:
    p, g = _same_shape(pred, gt)
    hd, asd, assd = surface_distances(p, g, spacing)
    sens, prec = sens_prec(p, g)
    empty = bool(p.any()) != bool(g.any())
    return CaseMetrics(case_id, dsc(p, g), hd, asd, assd, sens, prec, empty)


@dataclass
class MetricsReport:
    cases: list[CaseMetrics]

    def aggregate(self) -> dict[str, float]:
        if not self.cases:
            return {k: float("nan") for k in METRIC_COLUMNS}
        return {k: float(np.mean([getattr(c, k) for c in self.cases])) for k in METRIC_COLUMNS}

    @property
    def n_empty(self) -> int:
        return sum(c.empty_flag for c in self.cases)


def evaluate(pairs: Iterable[tuple[str, np.ndarray, np.ndarray]],
             spacing: tuple[float, float] = (1.0, 1.0)) -> MetricsReport:
    """Evaluate ``(case_id, pred, gt)`` triples."""
    return MetricsReport([evaluate_case(p, g, spacing, cid) for cid, p, g in pairs])
