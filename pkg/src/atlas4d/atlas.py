"""Spatiotemporal atlas construction by joint optimization.

Each gestational day ``t`` has an initial atlas ``A0_t`` (voxelwise median of
the images within ``delta`` days) and a deviation ``Ag_t``. Every image owns
a stationary velocity field. All of them are optimized together with Adam on
the summed per-image objective of :mod:`atlas4d.objective`.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .diffeo import SvfConfig, Workspace, integrate_svf
from .metrics import atlas_head_mask, dsc
from .objective import LossBreakdown, LossWeights, NonFiniteError, day_objective
from .optim import Adam
from .volume import warp_mask

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """The objective became non-finite during optimization."""

    def __init__(self, iteration, term=None):
        msg = f"optimization diverged at iteration {iteration}"
        if term:
            msg += f" (term '{term}')"
        super().__init__(msg)
        self.iteration = iteration
        self.term = term


@dataclass
class CohortEntry:
    subject_id: str
    day: int
    image: np.ndarray
    head_mask: np.ndarray
    group: str | None = None
    labels: np.ndarray | None = None
    spacing: float = 1.0

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.head_mask = np.asarray(self.head_mask, dtype=bool)
        if self.image.shape != self.head_mask.shape:
            raise ValueError(f"{self.key}: image {self.image.shape} and mask {self.head_mask.shape} differ")

    @property
    def key(self) -> str:
        return f"{self.subject_id}_d{self.day}"


@dataclass(frozen=True)
class FitConfig:
    """Optimization settings.

    ``delta`` is the half-width of the initial-atlas window in days;
    ``math.inf`` gives one global median atlas. ``seed`` is recorded for
    provenance; the optimization itself draws no random numbers.
    """

    delta: float = 3
    weights: LossWeights = LossWeights()
    iterations: int = 500
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    svf: SvfConfig = SvfConfig()
    constraint_mode: str = "exact"
    kappa: int = 18
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (self.delta >= 0):
            raise ValueError(f"delta must be >= 0 or inf, got {self.delta}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.constraint_mode not in ("exact", "running"):
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")

    def to_dict(self):
        return {
            "delta": "inf" if math.isinf(self.delta) else self.delta,
            "lambda_constraint": self.weights.constraint,
            "lambda_deformation": self.weights.deformation,
            "lambda_atlas": self.weights.atlas,
            "ncc_window": self.weights.ncc_window,
            "ncc_eps": self.weights.ncc_eps,
            "iterations": self.iterations,
            "step_size": self.step_size,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "squaring_steps": self.svf.squaring_steps,
            "constraint_mode": self.constraint_mode,
            "kappa": self.kappa,
            "deterministic": self.deterministic,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        delta = d.get("delta", 3)
        return cls(
            delta=math.inf if delta in ("inf", "Infinity") else float(delta),
            weights=LossWeights(d.get("lambda_constraint", 10.0), d.get("lambda_deformation", 0.01),
                                d.get("lambda_atlas", 1.0), d.get("ncc_window", 9), d.get("ncc_eps", 1e-5)),
            iterations=d.get("iterations", 500),
            step_size=d.get("step_size", 1e-2),
            beta1=d.get("beta1", 0.9),
            beta2=d.get("beta2", 0.999),
            svf=SvfConfig(d.get("squaring_steps", 7)),
            constraint_mode=d.get("constraint_mode", "exact"),
            kappa=d.get("kappa", 18),
            deterministic=d.get("deterministic", True),
            seed=d.get("seed", 0),
        )


@dataclass
class AtlasModel:
    days: list
    initial: dict
    deviation: dict
    spacing: dict
    velocities: dict = field(default_factory=dict)
    image_days: dict = field(default_factory=dict)
    config: FitConfig = FitConfig()
    loss_trace: list = field(default_factory=list)
    final_loss: float | None = None

    @property
    def shape(self):
        return self.initial[self.days[0]].shape

    def atlas(self, t):
        return atlas_at(self, t)


def _sorted_entries(cohort):
    return sorted(cohort, key=lambda e: (e.day, e.subject_id))


def build_initial_atlas(cohort, delta, days=None):
    """Voxelwise lower median of the images within ``delta`` days of each day.

    Returns a dict ``day -> array`` covering ``days`` (default: every day
    from the first to the last acquisition).
    """
    cohort = list(cohort)
    if not cohort:
        raise ValueError("cohort is empty")
    if days is None:
        all_days = [e.day for e in cohort]
        days = list(range(min(all_days), max(all_days) + 1))
    entries = _sorted_entries(cohort)
    stack_days = np.array([e.day for e in entries])

    def median(sel):
        stack = np.stack([entries[i].image for i in np.flatnonzero(sel)]).astype(np.float64)
        kth = (len(stack) - 1) // 2
        return np.partition(stack, kth, axis=0)[kth]

    if math.isinf(delta):
        glob = median(np.ones(len(entries), dtype=bool))
        return {t: glob.copy() for t in days}
    out = {}
    for t in days:
        sel = np.abs(stack_days - t) <= delta
        if not sel.any():
            raise ValueError(f"no images within {delta} days of day {t}")
        out[t] = median(sel)
    return out


def atlas_at(model: AtlasModel, t):
    """``A0_t + Ag_t`` clamped to [0, 1]."""
    if t not in model.initial:
        raise KeyError(f"day {t} outside the atlas range [{model.days[0]}, {model.days[-1]}]")
    return np.clip(model.initial[t] + model.deviation[t], 0.0, 1.0)


def _check_cohort(cohort):
    if not cohort:
        raise ValueError("cohort is empty")
    shape = cohort[0].image.shape
    keys = set()
    for e in cohort:
        if e.image.shape != shape:
            raise ValueError(f"{e.key}: shape {e.image.shape} differs from {shape}")
        if e.key in keys:
            raise ValueError(f"duplicate acquisition {e.key}")
        keys.add(e.key)


def fit(cohort, config: FitConfig = FitConfig(), callback=None) -> AtlasModel:
    """Jointly optimize per-day atlas deviations and per-image velocity fields.

    Each iteration visits the days in increasing order and takes one Adam
    step on the parameters of that day (its deviation and the velocities of
    its images). ``loss_trace[i]`` is the summed objective at the start of
    iteration ``i``.
    """
    cohort = list(cohort)
    _check_cohort(cohort)
    entries = _sorted_entries(cohort)
    initial = build_initial_atlas(entries, config.delta)
    days = sorted(initial)
    shape = entries[0].image.shape
    by_day = {}
    for e in entries:
        by_day.setdefault(e.day, []).append(e)

    deviation = {t: np.zeros(shape) for t in days}
    nus = {e.key: np.zeros(shape + (3,)) for e in entries}
    images = {e.key: np.asarray(e.image, dtype=np.float64) for e in entries}
    order = [e.key for e in entries]
    latest_u = {k: np.zeros(shape + (3,)) for k in order} if config.constraint_mode == "running" else None
    opt = Adam(config.step_size, config.beta1, config.beta2)
    ws = Workspace()
    trace = []
    t0 = time.perf_counter()

    def run_day(t, need_grad):
        batch = by_day[t]
        keys = [e.key for e in batch]
        stale = None
        if config.constraint_mode == "running":
            stale = []
            for k in keys:
                pos = order.index(k)
                stale.append([latest_u[j] for j in order[max(0, pos - config.kappa + 1):pos]])
        return keys, day_objective(initial[t], deviation[t], [images[k] for k in keys], [nus[k] for k in keys],
                                   config.weights, config.svf, constraint=config.constraint_mode,
                                   stale_fields=stale, need_grad=need_grad, workspace=ws)

    for it in range(config.iterations):
        total = 0.0
        for t in sorted(by_day):
            try:
                keys, (bds, g_nus, g_ag, extras) = run_day(t, True)
            except NonFiniteError as exc:
                raise DivergenceError(it, exc.term) from exc
            total += sum(b.total for b in bds)
            params = {k: nus[k] for k in keys}
            grads = dict(zip(keys, g_nus))
            params[("ag", t)] = deviation[t]
            grads[("ag", t)] = g_ag
            opt.step(params, grads)
            if latest_u is not None:
                latest_u.update(zip(keys, extras["u"]))
        if not math.isfinite(total):
            raise DivergenceError(it)
        trace.append(total)
        if callback is not None:
            callback(it, total)
        if it % 10 == 0 or it == config.iterations - 1:
            logger.info("iteration %d  loss %.6f  (%.1fs)", it, total, time.perf_counter() - t0)

    final = 0.0
    for t in sorted(by_day):
        _, (bds, *_rest) = run_day(t, False)
        final += sum(b.total for b in bds)
    if not math.isfinite(final):
        raise DivergenceError(config.iterations)

    spacing = {t: float(by_day[t][0].spacing) if t in by_day else float(entries[0].spacing) for t in days}
    return AtlasModel(
        days=days,
        initial=initial,
        deviation=deviation,
        spacing=spacing,
        velocities=nus,
        image_days={e.key: e.day for e in entries},
        config=config,
        loss_trace=trace,
        final_loss=final,
    )


class Registration(NamedTuple):
    nu: np.ndarray
    u: np.ndarray
    u_inv: np.ndarray
    loss: LossBreakdown
    dsc: float


def register_to_atlas(model: AtlasModel, entry: CohortEntry, config: FitConfig | None = None) -> Registration:
    """Fit one velocity field to a frozen atlas (no groupwise term)."""
    config = config or model.config
    if entry.image.shape != model.shape:
        raise ValueError(f"image shape {entry.image.shape} does not match atlas grid {model.shape}")
    t = entry.day
    if t not in model.initial:
        raise KeyError(f"day {t} outside the atlas range [{model.days[0]}, {model.days[-1]}]")
    a0 = model.initial[t]
    ag = model.deviation[t]
    weights = LossWeights(0.0, config.weights.deformation, 0.0, config.weights.ncc_window, config.weights.ncc_eps)
    image = np.asarray(entry.image, dtype=np.float64)
    nu = np.zeros(model.shape + (3,))
    opt = Adam(config.step_size, config.beta1, config.beta2)
    ws = Workspace()
    for it in range(config.iterations):
        try:
            bds, g_nus, _, _ = day_objective(a0, ag, [image], [nu], weights, config.svf, constraint=None,
                                             workspace=ws)
        except NonFiniteError as exc:
            raise DivergenceError(it, exc.term) from exc
        opt.step({"nu": nu}, {"nu": g_nus[0]})
    bds, _, _, extras = day_objective(a0, ag, [image], [nu], weights, config.svf, constraint=None, need_grad=False)
    u = integrate_svf(nu, config.svf)
    u_inv = extras["u_inv"][0]
    warped = warp_mask(atlas_head_mask(atlas_at(model, t)), u_inv)
    return Registration(nu, u, u_inv, bds[0], dsc(entry.head_mask, warped))


@dataclass
class DayResidual:
    day: int
    n_images: int
    mean: np.ndarray
    std: np.ndarray
    norm_mean: float
    norm_std: float


def day_residual(day, fields, mask) -> DayResidual:
    """Statistics over ``mask`` of the average ``U_t`` of displacement ``fields``."""
    fields = list(fields)
    if not fields:
        raise ValueError("no fields for this day")
    acc = np.zeros_like(fields[0], dtype=np.float64)
    for u in fields:
        acc += u
    mean_u = acc / len(fields)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        mask = np.ones(mask.shape, dtype=bool)
    vals = mean_u[mask]
    norms = np.linalg.norm(vals, axis=1)
    return DayResidual(day, len(fields), vals.mean(0), vals.std(0), float(norms.mean()), float(norms.std()))


def groupwise_residual(model: AtlasModel, svf: SvfConfig | None = None):
    """Per-day statistics of the average displacement over the atlas head mask."""
    svf = svf or model.config.svf
    by_day = {}
    for key, t in sorted(model.image_days.items(), key=lambda kv: (kv[1], kv[0])):
        by_day.setdefault(t, []).append(key)
    return {t: day_residual(t, (integrate_svf(model.velocities[k], svf) for k in keys),
                            atlas_head_mask(atlas_at(model, t)))
            for t, keys in sorted(by_day.items())}
