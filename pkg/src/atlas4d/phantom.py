"""Deterministic synthetic cohorts: a growing ellipsoidal head with internal structures.

The template is analytic. Each image samples it at ``x + u(x)``, with ``u``
the subject's smooth diffeomorphism, so images, masks and labels stay
consistent without resampling artefacts. Structure positions are given in
head-normalized coordinates and scale with the head radius.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .atlas import CohortEntry
from .diffeo import SvfConfig, integrate_svf, smooth_random_field

HEAD_AXES = (1.0, 0.85, 0.8)
SHELL_INNER = 0.85
TISSUE = 0.5
SKULL = 0.9
CAVITY = 0.2
LATE = 0.95

# label -> (name, center, semi-axes) in units of the head radius
STRUCTURES = {
    1: ("ventricle_left", (0.1, -0.4, 0.2), (0.3, 0.15, 0.15)),
    2: ("ventricle_right", (0.1, 0.4, 0.2), (0.3, 0.15, 0.15)),
    3: ("effect_region", (-0.4, 0.0, -0.2), (0.35, 0.35, 0.35)),
    4: ("late_structure", (0.3, 0.0, 0.1), (0.2, 0.2, 0.2)),
}
EFFECT_LABEL = 3
LATE_LABEL = 4
MARGIN = 4


@dataclass(frozen=True)
class PhantomConfig:
    n: int = 48
    day_min: int = 56
    day_max: int = 90
    n_subjects: int = 30
    visits: int = 2
    visit_gap: int = 16
    cadence: int = 3
    schedule: tuple | None = None
    r0_frac: float = 0.22
    growth: float = 0.012
    appear_offset: int = 9
    fade_days: int = 3
    deform_max: float = 1.5
    deform_sigma: float | None = None
    speckle: float = 0.1
    speckle_sigma: float = 1.0
    effect_scale: float = 0.9
    effect_groups: tuple = ("B",)
    groups: tuple = ("A", "B")
    seed: int = 0

    def __post_init__(self):
        if self.n < 8:
            raise ValueError("grid side must be >= 8")
        if self.day_max < self.day_min:
            raise ValueError("day_max < day_min")
        if self.cadence < 1 or self.visit_gap < 1:
            raise ValueError("cadence and visit_gap must be >= 1")
        if self.n_subjects < 1 or self.visits < 1:
            raise ValueError("need at least one subject and one visit")
        if self.deform_max < 0 or self.speckle < 0:
            raise ValueError("deformation and speckle strengths must be non-negative")
        if not self.effect_scale > 0:
            raise ValueError("effect_scale must be positive")
        reach = self.radius(self.day_max) + self.deform_max + 1.0
        half = (self.n - 1) / 2.0
        if half - reach < MARGIN:
            raise ValueError(
                f"head reaches {reach:.2f} voxels from the centre; a {MARGIN}-voxel margin needs n >= {math.ceil(2 * (reach + MARGIN) + 1)}"
            )
        if self.growth < 0 or self.radius(self.day_min) <= 0:
            raise ValueError("head radius must be positive and non-decreasing")

    @property
    def r0(self):
        return self.r0_frac * self.n

    @property
    def appear_day(self):
        return self.day_min + self.appear_offset

    def radius(self, t):
        return self.r0 * (1.0 + self.growth * (t - self.day_min))

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = [list(v) for v in self.schedule] if self.schedule is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("effect_groups", "groups"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("schedule") is not None:
            d["schedule"] = tuple(tuple(v) for v in d["schedule"])
        return cls(**d)


@dataclass
class PhantomTruth:
    head_volume: dict = field(default_factory=dict)
    head_masks: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    velocities: dict = field(default_factory=dict)
    label_names: dict = field(default_factory=lambda: {k: v[0] for k, v in STRUCTURES.items()})


def make_schedule(config: PhantomConfig):
    """``[(subject_index, day), ...]`` sorted by day.

    First visits cycle through days ``day_min, day_min + cadence, ...`` and
    subjects return every ``visit_gap`` days, so scans cluster on a few
    acquisition days as clinical cohorts do. ``cadence=1`` gives one
    subject per day when there are enough subjects.
    """
    if config.schedule is not None:
        sched = [(int(s), int(d)) for s, d in config.schedule]
    else:
        last_first = max(config.day_min, config.day_max - config.visit_gap * (config.visits - 1))
        slots = list(range(config.day_min, last_first + 1, config.cadence))
        sched = []
        for s in range(config.n_subjects):
            first = slots[s % len(slots)]
            for v in range(config.visits):
                day = first + v * config.visit_gap
                if day <= config.day_max:
                    sched.append((s, day))
    if len(set(sched)) != len(sched):
        raise ValueError("schedule repeats a (subject, day) pair")
    for s, d in sched:
        if not config.day_min <= d <= config.day_max:
            raise ValueError(f"scheduled day {d} outside [{config.day_min}, {config.day_max}]")
    return sorted(sched, key=lambda sd: (sd[1], sd[0]))


def _ellipsoid_level(q, center, axes):
    return sum(((q[..., i] - center[i]) / axes[i]) ** 2 for i in range(3))


def _ramp(level, size):
    # Intensity weight with a one-voxel ramp ending at the surface: the
    # surface voxel keeps weight 0.125 so a 0.1 threshold recovers it.
    dist = (np.sqrt(level) - 1.0) * size
    return np.clip(0.125 - dist, 0.0, 1.0)


def template(points, t, config: PhantomConfig, group=None):
    """Noiseless template intensity, head mask and labels at voxel-coordinate ``points``."""
    r = config.radius(t)
    c = (config.n - 1) / 2.0
    q = (np.asarray(points, dtype=np.float64) - c) / r
    head_level = _ellipsoid_level(q, (0, 0, 0), HEAD_AXES)
    head_size = r * min(HEAD_AXES)
    head_w = _ramp(head_level, head_size)
    shell_w = 1.0 - _ramp(head_level / SHELL_INNER ** 2, SHELL_INNER * head_size)
    img = head_w * (TISSUE + (SKULL - TISSUE) * shell_w)
    mask = head_level <= 1.0
    labels = np.zeros(q.shape[:-1], dtype=np.int16)
    late_alpha = float(np.clip((t - config.appear_day + 1) / config.fade_days, 0.0, 1.0))
    for lab, (_, center, axes) in STRUCTURES.items():
        if lab == EFFECT_LABEL and group in config.effect_groups:
            axes = tuple(a * config.effect_scale for a in axes)
        level = _ellipsoid_level(q, center, axes)
        labels[level <= 1.0] = lab
        w = _ramp(level, r * min(axes))
        if lab == LATE_LABEL:
            target, w = LATE, w * late_alpha
        else:
            target = CAVITY
        img = img * (1.0 - w) + target * w
    return img, mask, labels


def _grid(n):
    g = np.arange(n, dtype=np.float64)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)


def _speckle(shape, sigma, rng):
    eta = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return eta / eta.std()


def subject_group(config: PhantomConfig, s):
    return config.groups[s % len(config.groups)]


def generate_cohort(config: PhantomConfig = PhantomConfig()):
    """Returns ``(entries, truth, manifest)``; ``manifest`` lists subject, day and group per image."""
    n = config.n
    grid = _grid(n)
    svf = SvfConfig()
    sigma = config.deform_sigma if config.deform_sigma is not None else n / 8.0
    truth = PhantomTruth()
    entries, manifest = [], []
    fields = {}
    for s, t in make_schedule(config):
        sid = f"sub{s:03d}"
        group = subject_group(config, s)
        if s not in fields:
            rng = np.random.default_rng([config.seed, s])
            if config.deform_max > 0:
                nu = smooth_random_field((n, n, n), config.deform_max, sigma, rng)
                fields[s] = (nu, integrate_svf(nu, svf))
            else:
                fields[s] = (np.zeros((n, n, n, 3)), np.zeros((n, n, n, 3)))
            truth.velocities[sid] = fields[s][0]
        u = fields[s][1]
        img, mask, labels = template(grid + u, t, config, group)
        if config.speckle > 0:
            rng = np.random.default_rng([config.seed, s, t])
            img = img * (1.0 + config.speckle * _speckle(img.shape, config.speckle_sigma, rng))
        img = np.clip(img, 0.0, 1.0)
        entry = CohortEntry(sid, t, img, mask, group=group, labels=labels)
        entries.append(entry)
        truth.head_volume[entry.key] = analytic_head_voxels(config, t)
        truth.head_masks[entry.key] = mask
        truth.labels[entry.key] = labels
        manifest.append({"subject_id": sid, "day": t, "group": group})
    return entries, truth, manifest


def analytic_head_voxels(config: PhantomConfig, t):
    r = config.radius(t)
    return 4.0 / 3.0 * math.pi * r ** 3 * HEAD_AXES[0] * HEAD_AXES[1] * HEAD_AXES[2]


def analytic_volume_curve(config: PhantomConfig = PhantomConfig(), spacing: float = 1.0):
    """Closed-form head volume in cm^3 for every day of the range."""
    return {t: analytic_head_voxels(config, t) * spacing ** 3 / 1000.0
            for t in range(config.day_min, config.day_max + 1)}


def template_labels(config: PhantomConfig, t, group=None):
    """Undeformed label volume of day ``t``."""
    return template(_grid(config.n), t, config, group)[2]
