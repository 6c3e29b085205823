"""Evaluation metrics for fitted atlases and registrations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import DAY_MAX, DAY_MIN


def dsc(a, b) -> float:
    """Dice overlap of two binary masks; two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def ball(radius: int):
    r = int(radius)
    g = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return x * x + y * y + z * z <= r * r


def morphology_radius(n: int) -> int:
    """Ball radius for a grid of side ``n``: 10 voxels at 128, scaled linearly."""
    return max(1, int(round(10 * n / 128)))


def atlas_head_mask(atlas, n: int | None = None, threshold: float = 0.1):
    """Head segmentation of an atlas: threshold, then opening and closing with a ball.

    The grid is padded by the ball radius so neither operation sees the
    array border as foreground or background.
    """
    atlas = np.asarray(atlas)
    if n is None:
        n = max(atlas.shape)
    r = morphology_radius(n)
    st = ball(r)
    m = np.pad(atlas >= threshold, r + 1)
    m = ndimage.binary_opening(m, structure=st)
    m = ndimage.binary_closing(m, structure=st)
    return m[tuple(slice(r + 1, -(r + 1)) for _ in range(3))]


def head_volume_cm3(mask, spacing: float) -> float:
    return float(np.count_nonzero(mask)) * spacing ** 3 / 1000.0


def hv_reference(t: float) -> float:
    """Reference head-volume growth curve in cm^3 at gestational day ``t``."""
    base = -1.0947 + 0.0315 * t
    if base <= 0:
        raise ValueError(f"reference head volume undefined at day {t}")
    return base ** 4


def hv_error(volume: float, t: float) -> float:
    """Relative head-volume error in percent against ``hv_reference``."""
    ref = hv_reference(t)
    return 100.0 * abs(volume - ref) / ref


def sharpness(atlas, mask, window: int = 5, eps: float = 1e-6) -> float:
    """Mean over ``mask`` of local std / local mean in a ``window**3`` cube.

    Cubes are clipped at the grid border and the std is the population one.
    Voxels whose local mean is below ``eps`` contribute 0.
    """
    a = np.asarray(atlas, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    count = ndimage.uniform_filter(np.ones_like(a), window, mode="constant")
    mean = ndimage.uniform_filter(a, window, mode="constant") / count
    # Moments of the centred volume keep the variance of flat regions exactly 0.
    c = a - a[mask].mean()
    cm = ndimage.uniform_filter(c, window, mode="constant") / count
    sq = ndimage.uniform_filter(c * c, window, mode="constant") / count
    std = np.sqrt(np.maximum(sq - cm * cm, 0.0))
    ratio = np.where(mean >= eps, std / np.where(mean >= eps, mean, 1.0), 0.0)
    return float(ratio[mask].mean())


def ssim(a, b, window: int = 7, data_range: float = 1.0) -> float:
    """Mean structural similarity over all fully in-grid ``window**3`` cubes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    f = lambda x: ndimage.uniform_filter(x, window, mode="reflect")
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a * mu_a
    var_b = f(b * b) - mu_b * mu_b
    cov = f(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    pad = window // 2
    inner = tuple(slice(pad, n - pad) for n in a.shape)
    return float(s[inner].mean())


@dataclass
class MetricReport:
    """Per-image registration metrics and per-day atlas metrics."""

    images: list = field(default_factory=list)
    days: list = field(default_factory=list)

    IMAGE_COLUMNS = ("subject_id", "day", "dsc", "pct_nonpos_jacobian")
    DAY_COLUMNS = ("day", "hv_cm3", "hv_error_pct", "sharpness", "ssim")

    def summary(self):
        out = {}
        for key in ("dsc", "pct_nonpos_jacobian"):
            vals = np.array([row[key] for row in self.images], dtype=float)
            if len(vals):
                out[key] = (float(vals.mean()), float(vals.std()))
        for key in ("hv_error_pct", "sharpness", "ssim"):
            vals = np.array([row[key] for row in self.days if row.get(key) is not None], dtype=float)
            if len(vals):
                out[key] = (float(vals.mean()), float(vals.std()))
        return out


def check_day(t):
    if not DAY_MIN <= t <= DAY_MAX:
        raise ValueError(f"day {t} outside [{DAY_MIN}, {DAY_MAX}]")
