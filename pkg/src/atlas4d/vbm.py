"""Voxel-based morphometry on Jacobian-determinant maps.

Each image contributes the log Jacobian determinant of its atlas-to-image
deformation, smoothed inside the atlas head mask. Two groups are compared
voxelwise with Welch's t-test in non-overlapping day windows, and one
Benjamini-Hochberg threshold is applied to the pooled in-mask p-values of
all windows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats
from scipy.ndimage import gaussian_filter

from .atlas import AtlasModel, atlas_at, register_to_atlas
from .diffeo import integrate_svf, jacobian_det
from .metrics import atlas_head_mask

logger = logging.getLogger(__name__)

J_FLOOR = 1e-3


@dataclass(frozen=True)
class VbmConfig:
    sigma: float = 2.0
    delta: int = 3
    q: float = 0.05
    log_first: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.delta < 0 or int(self.delta) != self.delta:
            raise ValueError("delta must be a non-negative integer")
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")

    @property
    def window(self):
        return 2 * int(self.delta) + 1


class Descriptor(NamedTuple):
    values: np.ndarray
    n_clamped: int


def _masked_smooth(x, mask, sigma):
    # Normalized convolution: averages only over in-mask voxels, so a
    # constant map stays constant up to the mask border.
    m = mask.astype(np.float64)
    num = gaussian_filter(np.where(mask, x, 0.0), sigma, mode="constant")
    den = gaussian_filter(m, sigma, mode="constant")
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=mask & (den > 0))
    return out


def descriptor_map(u, mask, sigma: float = 2.0, log_first: bool = True) -> Descriptor:
    """Smoothed log Jacobian determinant of ``x -> x + u(x)`` inside ``mask``.

    Determinants at or below zero are clamped to ``J_FLOOR`` before the log
    and counted in ``n_clamped``. Voxels outside the mask are 0.
    """
    mask = np.asarray(mask, dtype=bool)
    det = jacobian_det(u)
    bad = mask & (det <= 0)
    n_bad = int(np.count_nonzero(bad))
    if n_bad:
        logger.warning("%d voxels with non-positive Jacobian clamped to %g", n_bad, J_FLOOR)
    det = np.where(det <= 0, J_FLOOR, det)
    if log_first:
        values = _masked_smooth(np.log(det), mask, sigma)
    else:
        sm = _masked_smooth(det, mask, sigma)
        values = np.zeros_like(sm)
        np.log(sm, out=values, where=mask)
    values[~mask] = 0.0
    return Descriptor(values, n_bad)


def group_test(maps_a, maps_b, mask=None):
    """Voxelwise two-sided Welch t-test; returns p-values (1 outside ``mask``)."""
    a = np.stack([np.asarray(m, dtype=np.float64) for m in maps_a])
    b = np.stack([np.asarray(m, dtype=np.float64) for m in maps_b])
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least two maps")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError("group maps differ in shape")
    na, nb = len(a), len(b)
    va = a.var(axis=0, ddof=1) / na
    vb = b.var(axis=0, ddof=1) / nb
    se2 = va + vb
    diff = a.mean(axis=0) - b.mean(axis=0)
    ok = se2 > 0
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    p = np.ones(a.shape[1:])
    t = np.abs(diff[ok]) / np.sqrt(se2[ok])
    df = se2[ok] ** 2 / (va[ok] ** 2 / (na - 1) + vb[ok] ** 2 / (nb - 1))
    p[ok] = np.clip(2.0 * stats.t.sf(t, df), 0.0, 1.0)
    return p


def fdr_bh(p, q: float = 0.05):
    """Benjamini-Hochberg step-up. Returns ``(threshold, rejected)``; threshold 0 means none."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    m = p.size
    if m == 0:
        return 0.0, np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    ok = ranked <= q * np.arange(1, m + 1) / m
    if not ok.any():
        return 0.0, np.zeros(m, dtype=bool)
    k = int(np.flatnonzero(ok)[-1])
    threshold = float(ranked[k])
    rejected = np.zeros(m, dtype=bool)
    rejected[order[: k + 1]] = True
    return threshold, rejected


@dataclass
class VbmResult:
    windows: list
    p_values: dict
    threshold: float
    significant: dict
    masks: dict
    structure_percent: dict = field(default_factory=dict)
    n_clamped: int = 0
    skipped: list = field(default_factory=list)

    def total_significant(self):
        return int(sum(np.count_nonzero(s) for s in self.significant.values()))

    def structure_rows(self):
        """``(label, window_start, window_end, percent)`` rows sorted by window then label."""
        rows = []
        for (lab, w), pct in sorted(self.structure_percent.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            rows.append((lab, self.windows[w][0], self.windows[w][1], pct))
        return rows


def make_windows(days, delta: int):
    """Non-overlapping windows of ``2 * delta + 1`` days anchored at the first day."""
    width = 2 * int(delta) + 1
    lo, hi = min(days), max(days)
    return [(s, min(s + width - 1, hi)) for s in range(lo, hi + 1, width)]


def _fields_for(model, entry):
    if entry.key in model.velocities:
        return integrate_svf(model.velocities[entry.key], model.config.svf)
    return register_to_atlas(model, entry).u


def compute_descriptors(model: AtlasModel, cohort, config: VbmConfig = VbmConfig()):
    """Descriptor map of every cohort entry, keyed by ``entry.key``, and the clamp tally."""
    out, tally = {}, 0
    masks = {}
    for e in cohort:
        if e.day not in masks:
            masks[e.day] = atlas_head_mask(atlas_at(model, e.day))
        d = descriptor_map(_fields_for(model, e), masks[e.day], config.sigma, config.log_first)
        out[e.key] = d.values
        tally += d.n_clamped
    return out, tally


def run_vbm(model: AtlasModel, cohort, config: VbmConfig = VbmConfig(), labels=None,
            descriptors=None, groups=None) -> VbmResult:
    """Windowed group comparison with pooled FDR control.

    ``labels`` is a label volume on the atlas grid or a dict ``day -> volume``
    (the window's centre day is used). ``descriptors`` reuses the output of
    ``compute_descriptors``; ``groups`` overrides the group of each subject
    (``subject_id -> group``), as in permutation runs.
    """
    cohort = sorted(cohort, key=lambda e: (e.day, e.subject_id))
    if not cohort:
        raise ValueError("cohort is empty")
    group_of = {e.subject_id: e.group for e in cohort}
    if groups is not None:
        group_of.update(groups)
    names = sorted({g for g in group_of.values() if g is not None})
    if len(names) != 2:
        raise ValueError(f"need exactly two groups, got {names}")
    tally = 0
    if descriptors is None:
        descriptors, tally = compute_descriptors(model, cohort, config)

    windows = make_windows([e.day for e in cohort], config.delta)
    p_values, masks, skipped = {}, {}, []
    for w, (lo, hi) in enumerate(windows):
        first = {}
        for e in cohort:
            if lo <= e.day <= hi and e.subject_id not in first:
                first[e.subject_id] = e
        sets = {g: [descriptors[e.key] for e in first.values() if group_of[e.subject_id] == g] for g in names}
        if min(len(v) for v in sets.values()) < 2:
            logger.warning("window %d-%d skipped: group sizes %s", lo, hi, {g: len(v) for g, v in sets.items()})
            skipped.append((lo, hi))
            continue
        centre = min(max((lo + hi) // 2, model.days[0]), model.days[-1])
        mask = atlas_head_mask(atlas_at(model, centre))
        masks[w] = mask
        p_values[w] = group_test(sets[names[0]], sets[names[1]], mask)

    pooled = np.concatenate([p_values[w][masks[w]] for w in p_values]) if p_values else np.zeros(0)
    threshold, rejected = fdr_bh(pooled, config.q)
    significant, pos = {}, 0
    for w in p_values:
        sig = np.zeros(masks[w].shape, dtype=bool)
        cnt = int(masks[w].sum())
        sig[masks[w]] = rejected[pos:pos + cnt]
        pos += cnt
        significant[w] = sig

    percent = {}
    if labels is not None:
        for w in p_values:
            lo, hi = windows[w]
            lab = labels[min(labels, key=lambda d: (abs(d - (lo + hi) / 2), d))] if isinstance(labels, dict) else labels
            lab = np.asarray(lab)
            for value in np.unique(lab[lab > 0]):
                region = lab == value
                percent[(int(value), w)] = 100.0 * np.count_nonzero(significant[w] & region) / np.count_nonzero(region)
    return VbmResult(windows, p_values, threshold, significant, masks, percent, tally, skipped)
