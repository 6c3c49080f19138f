"""Image/mask datasets, deterministic splits and synthetic tumor images."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import FormatError, LoadError, SpecError, SplitError

log = logging.getLogger(__name__)

MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass
class Sample:
    image: np.ndarray  # float64 (H, W) in [0, 1]
    mask: np.ndarray  # uint8 (H, W) in {0, 1}
    case_id: str
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise FormatError(f"{self.case_id}: image {self.image.shape} and mask {self.mask.shape} differ")


# --------------------------------------------------------------------------
# PNG directory layout: root/images/<stem>.png, root/masks/<stem>.png

_GRAY_MODES = {"L": 255.0, "I;16": 65535.0, "I;16B": 65535.0, "I;16L": 65535.0, "I": 65535.0}


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in _GRAY_MODES:
            raise FormatError(f"{path.name}: expected 8- or 16-bit grayscale, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.float64)
        return arr / _GRAY_MODES[im.mode]


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in _GRAY_MODES and im.mode not in ("1", "P"):
            raise FormatError(f"{path.name}: mask must be single-channel, got mode {im.mode}")
        return (np.asarray(im) > 0).astype(np.uint8)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape == (size, size):
        return img
    out = Image.fromarray(img.astype(np.float32)).resize((size, size), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    out = Image.fromarray(mask.astype(np.uint8)).resize((size, size), Image.NEAREST)
    return (np.asarray(out) > 0).astype(np.uint8)


def load_dataset(root, size: Optional[int] = None, normalize: str = "bitdepth") -> list[Sample]:
    """Read paired image/mask PNGs, sorted by case id.

    ``normalize="bitdepth"`` divides by the format maximum (255 or 65535);
    ``"minmax"`` rescales each image to span [0, 1].
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    images = {p.stem: p for p in sorted(img_dir.glob("*.png"))} if img_dir.is_dir() else {}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))} if mask_dir.is_dir() else {}
    if not images and not masks:
        warnings.warn(f"no image/mask pairs found under {root}", stacklevel=2)
        return []
    for stem in sorted(set(images) ^ set(masks)):
        side = "mask" if stem in images else "image"
        raise LoadError(f"case {stem!r} has no matching {side}")
    samples = []
    for stem in sorted(images):
        img = read_image(images[stem])
        mask = read_mask(masks[stem])
        if img.shape != mask.shape:
            raise FormatError(f"case {stem!r}: image {img.shape} vs mask {mask.shape}")
        if normalize == "minmax":
            lo, hi = img.min(), img.max()
            img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        elif normalize != "bitdepth":
            raise ValueError(f"unknown normalization {normalize!r}")
        if size is not None:
            img = resize_image(img, size)
            mask = resize_mask(mask, size)
        samples.append(Sample(img, mask, stem))
    return samples


def save_dataset(samples: Iterable[Sample], root) -> None:
    """Write samples as 8-bit image PNGs and 0/255 mask PNGs."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{s.case_id}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(root / "masks" / f"{s.case_id}.png")


# --------------------------------------------------------------------------
# portable shuffling


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood), pure integer arithmetic.

    Constants: increment 0x9E3779B97F4A7C15, multipliers 0xBF58476D1CE4E5B9
    and 0x94D049BB133111EB, shifts 30/27/31.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next()
            if v < limit:
                return v % n


def shuffled(items: Sequence, seed: int) -> list:
    """Fisher-Yates shuffle driven by SplitMix64."""
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    ratios: tuple = (7, 1, 2)

    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def to_text(self) -> str:
        ratios = ":".join(str(r) for r in self.ratios)
        lines = [f"seed = {self.seed}", f"ratios = {ratios}"]
        for name in ("train", "val", "test"):
            lines.append(f"[{name}]")
            lines.extend(getattr(self, name))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
        seed, ratios, current = 0, (7, 1, 2), None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise SplitError(f"unknown manifest section {line}")
            elif current is None and line.startswith("seed"):
                seed = int(line.split("=", 1)[1])
            elif current is None and line.startswith("ratios"):
                ratios = tuple(_num(v) for v in line.split("=", 1)[1].strip().split(":"))
            elif current is None:
                raise SplitError(f"unexpected manifest line before any section: {line!r}")
            else:
                sections[current].append(line)
        return cls(sections["train"], sections["val"], sections["test"], seed, ratios)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "SplitManifest":
        return cls.from_text(Path(path).read_text())


def _num(v: str):
    v = v.strip()
    return int(v) if v.lstrip("-").isdigit() else float(v)


def split_counts(n: int, ratios: Sequence[float] = (7, 1, 2)) -> tuple[int, int, int]:
    """Floor-allocate n by ratios; leftover items go to train, val, test in turn."""
    if len(ratios) != 3 or min(ratios) <= 0:
        raise SplitError(f"ratios must be three positive numbers, got {ratios}")
    fr = [Fraction(r).limit_denominator(10**9) if isinstance(r, float) else Fraction(r) for r in ratios]
    total = sum(fr)
    counts = [math.floor(n * r / total) for r in fr]
    for i in range(n - sum(counts)):
        counts[i % 3] += 1
    return tuple(counts)


def split(samples_or_ids: Sequence, ratios: Sequence[float] = (7, 1, 2), seed: int = 0,
          manifest_path=None) -> SplitManifest:
    """Deterministic train/val/test split of case ids.

    Ids are sorted, shuffled with the seeded SplitMix64 Fisher-Yates and cut
    by :func:`split_counts`.  An existing manifest at ``manifest_path`` is
    reused (and must cover the same ids); otherwise the new one is written.
    """
    ids = sorted(s.case_id if isinstance(s, Sample) else str(s) for s in samples_or_ids)
    if len(set(ids)) != len(ids):
        raise SplitError("duplicate case ids")
    if manifest_path is not None and Path(manifest_path).exists():
        m = SplitManifest.read(manifest_path)
        if sorted(m.train + m.val + m.test) != ids:
            raise SplitError(f"manifest {manifest_path} does not cover the dataset's case ids")
        return m
    if len(ids) < 3:
        raise SplitError(f"need at least 3 samples to split, got {len(ids)}")
    n_train, n_val, _ = split_counts(len(ids), ratios)
    order = shuffled(ids, seed)
    m = SplitManifest(order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:], seed, tuple(ratios))
    if manifest_path is not None:
        m.write(manifest_path)
    return m


def select(samples: Sequence[Sample], ids: Sequence[str]) -> list[Sample]:
    by_id = {s.case_id: s for s in samples}
    return [by_id[i] for i in ids]


# --------------------------------------------------------------------------
# synthetic irregular tumors


@dataclass
class SynthSpec:
    size: int = 64
    count: tuple[int, int] = (1, 2)
    radius: tuple[float, float] = (5.0, 13.0)
    amplitude: float = 2.5
    harmonics: tuple[int, int] = (2, 5)
    contrast: tuple[float, float] = (0.3, 0.6)
    background: tuple[float, float] = (0.1, 0.3)
    noise_sigma: float = 0.08
    seed: int = 0

    def at_size(self, size: int) -> "SynthSpec":
        """Copy with blob geometry scaled to a ``size`` x ``size`` canvas."""
        if size == self.size:
            return replace(self)
        k = size / self.size
        return replace(self, size=size, radius=(self.radius[0] * k, self.radius[1] * k),
                       amplitude=self.amplitude * k)

    def validate(self) -> None:
        r_lo, r_hi = self.radius
        if not 0 < r_lo <= r_hi:
            raise SpecError(f"radius range must satisfy 0 < lo <= hi, got {self.radius}")
        if self.amplitude < 0 or self.amplitude >= r_lo:
            raise SpecError(f"amplitude {self.amplitude} must be >= 0 and below the minimum radius {r_lo}")
        if 2 * (r_hi + self.amplitude) + 2 > self.size:
            raise SpecError(f"blobs of radius {r_hi} + {self.amplitude} do not fit a {self.size}px image")
        if not 1 <= self.count[0] <= self.count[1]:
            raise SpecError(f"count range must satisfy 1 <= lo <= hi, got {self.count}")
        if not 1 <= self.harmonics[0] <= self.harmonics[1]:
            raise SpecError(f"harmonics range invalid: {self.harmonics}")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be nonnegative")


def _blob_mask(size: int, rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    r = rng.uniform(*spec.radius)
    h_lo, h_hi = spec.harmonics
    orders = np.arange(h_lo, h_hi + 1)
    weights = rng.uniform(0.0, 1.0, len(orders))
    amps = spec.amplitude * weights / len(orders)  # sum of |amps| <= amplitude < r
    phases = rng.uniform(0.0, 2 * np.pi, len(orders))
    margin = r + spec.amplitude + 1
    cy = rng.uniform(margin, size - 1 - margin)
    cx = rng.uniform(margin, size - 1 - margin)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    radius = r + (amps[:, None, None] * np.cos(orders[:, None, None] * theta + phases[:, None, None])).sum(0)
    return np.hypot(dy, dx) <= radius


def synth_sample(spec: SynthSpec, index: int) -> Sample:
    """One synthetic case; depends only on (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    n_blobs = int(rng.integers(spec.count[0], spec.count[1] + 1))
    mask = np.zeros((spec.size, spec.size), dtype=bool)
    for _ in range(n_blobs):
        mask |= _blob_mask(spec.size, rng, spec)
    bg = rng.uniform(*spec.background)
    contrast = rng.uniform(*spec.contrast)
    image = np.where(mask, bg + contrast, bg)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image, mask.astype(np.uint8), f"synth_{spec.seed}_{index:05d}")


def synth_generate(spec: SynthSpec, n: int) -> list[Sample]:
    spec.validate()
    return [synth_sample(spec, i) for i in range(n)]
