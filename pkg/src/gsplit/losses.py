"""Training objective and image metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossWeights:
    perceptual: float = 0.5
    lifting: float = 1.0
    split: float = 0.5

    def __post_init__(self):
        if min(self.perceptual, self.lifting, self.split) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    image: float
    perceptual: float
    lifting: float
    split: float
    total: float
    total_tensor: Tensor | None = None


def _image_pair(a, b):
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1_image(a, b) -> Tensor:
    a, b = _image_pair(a, b)
    return dc.mean(dc.absolute(a - b))


def nearest_point_loss(ref_points, candidates, active=None) -> Tensor:
    """Mean distance from each reference point to its nearest candidate.

    Gradient reaches the chosen candidate only; ties go to the lowest index.
    ``active`` optionally restricts which candidate rows may be chosen.
    """
    ref = np.asarray(ref_points, dtype=np.float64).reshape(-1, 3)
    cand = dc.as_tensor(candidates)
    rows = np.arange(cand.shape[0]) if active is None else np.flatnonzero(np.asarray(active))
    if len(ref) == 0:
        raise ValueError("need at least one reference point")
    if len(rows) == 0:
        raise ValueError("empty candidate set")
    pts = cand.data[rows]
    d2 = ((ref[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    nearest = rows[np.argmin(d2, axis=1)]
    diff = dc.gather(cand, nearest) - Tensor(ref)
    return dc.mean(dc.sqrt(dc.tensor_sum(dc.square(diff), axis=1)))


def total_loss(rendered: list, targets: list, ref_points, identity_positions, split_positions,
               split_active=None, weights: LossWeights = LossWeights(),
               perceptual: Callable[[Tensor, np.ndarray], Tensor] | None = None) -> LossReport:
    """image + w_p * perceptual + w_l * lifting + w_s * split.

    Terms with no inputs (empty identity set, no split layers, no active split
    Gaussians) contribute zero. ``perceptual(rendered, target)`` is an optional
    plug-in; without it that term is zero.
    """
    zero = Tensor(0.0)
    img = zero
    per = zero
    for r, t in zip(rendered, targets):
        img = img + l1_image(r, t)
        if perceptual is not None:
            per = per + perceptual(r, t)
    if rendered:
        img = img / float(len(rendered))
        per = per / float(len(rendered))
    lift = zero
    if identity_positions is not None and identity_positions.shape[0]:
        lift = nearest_point_loss(ref_points, identity_positions)
    spl = zero
    if split_positions is not None and split_positions.shape[0]:
        act = np.ones(split_positions.shape[0], bool) if split_active is None else np.asarray(split_active, bool)
        if act.any():
            spl = nearest_point_loss(ref_points, split_positions, act)
    total = img + per * weights.perceptual + lift * weights.lifting + spl * weights.split
    return LossReport(img.item(), per.item(), lift.item(), spl.item(), total.item(), total)


def combine(image: float, perceptual: float, lifting: float, split: float, weights: LossWeights = LossWeights()) -> float:
    return image + weights.perceptual * perceptual + weights.lifting * lifting + weights.split * split


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2D array with the 1D window."""
    n = len(win)
    h, w = img.shape
    tmp = sum(win[i] * img[:, i:w - n + 1 + i] for i in range(n))
    return sum(win[i] * tmp[i:h - n + 1 + i, :] for i in range(n))


def ssim(a, b, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window, dynamic range 1, channels averaged."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if min(a.shape[:2]) < size:
        raise ValueError(f"image smaller than the {size}x{size} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = k1 * k1, k2 * k2
    win = gaussian_window(size, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))
