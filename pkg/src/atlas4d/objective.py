"""Registration and atlas loss terms with their exact gradients.

Every loss is a voxel mean so the default weights do not depend on grid size.
The per-image objective is::

    similarity(A o phi^-1, I) + l_constraint * constraint(u)
        + l_deformation * (magnitude(u^-1) + diffusion(u^-1))
        + l_atlas * magnitude(A^g)

with ``A = A^0 + A^g``, ``u = exp(nu)`` and ``u^-1 = exp(-nu)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np
from scipy.ndimage import uniform_filter

from . import _fused, _trilinear
from .diffeo import SvfConfig, Workspace, integrate_svf_vjp, integrate_with_steps


class NonFiniteError(FloatingPointError):
    """A loss term or its gradient produced NaN or Inf."""

    def __init__(self, term):
        super().__init__(f"non-finite value in loss term '{term}'")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    constraint: float = 10.0
    deformation: float = 0.01
    atlas: float = 1.0
    ncc_window: int = 9
    ncc_eps: float = 1e-5

    def __post_init__(self):
        if min(self.constraint, self.deformation, self.atlas) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be odd and >= 3, got {self.ncc_window}")
        if not self.ncc_eps > 0:
            raise ValueError("ncc_eps must be positive")


@dataclass
class LossBreakdown:
    similarity: float = 0.0
    constraint: float = 0.0
    magnitude: float = 0.0
    diffusion: float = 0.0
    atlas_magnitude: float = 0.0
    total: float = 0.0

    def __add__(self, other):
        return LossBreakdown(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def combine(similarity, constraint, magnitude, diffusion, atlas_magnitude, weights: LossWeights):
    total = (similarity + weights.constraint * constraint
             + weights.deformation * (magnitude + diffusion)
             + weights.atlas * atlas_magnitude)
    return LossBreakdown(similarity, constraint, magnitude, diffusion, atlas_magnitude, total)


def _box(x, w):
    # Zero-padded window sum; the kernel is symmetric so this is self-adjoint.
    return uniform_filter(x, size=w, mode="constant") * float(w) ** x.ndim


@lru_cache(maxsize=8)
def _window_counts(shape, w):
    counts = np.rint(_box(np.ones(shape), w))
    counts.setflags(write=False)
    return counts


def _lncc_args(a, b, window, eps):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"expected two volumes of equal shape, got {a.shape} and {b.shape}")
    return a, b, _window_counts(a.shape, window), int(window), float(eps)


def lncc_sq_loss(a, b, window: int = 9, eps: float = 1e-5) -> float:
    """Negative mean of the local squared normalized cross-correlation.

    Window statistics run over the in-grid part of each ``window**3`` cube,
    so the value is unaffected by per-image affine intensity changes. The
    minimum is -1; patches with no variance score 0.
    """
    return float(_fused.lncc(*_lncc_args(a, b, window, eps), False)[0])


def lncc_sq_grad(a, b, window: int = 9, eps: float = 1e-5):
    """Loss and its gradient with respect to ``a``."""
    loss, grad = _fused.lncc(*_lncc_args(a, b, window, eps), True)
    return float(loss), grad


def magnitude_loss(U) -> float:
    """Mean over voxels of the squared norm of each entry (vector or scalar)."""
    U = np.asarray(U, dtype=np.float64)
    n_vox = U.size // 3 if U.ndim == 4 else U.size
    return float(np.sum(U * U) / n_vox)


def magnitude_grad(U):
    U = np.asarray(U, dtype=np.float64)
    n_vox = U.size // 3 if U.ndim == 4 else U.size
    return 2.0 * U / n_vox


def diffusion_loss(u) -> float:
    """Mean over voxels and components of the squared forward-difference gradient norm.

    The last layer along each axis has no forward neighbour and contributes 0.
    """
    return float(_fused.diffusion(_as4d(u), False)[0])


def diffusion_grad(u):
    return _fused.diffusion(_as4d(u), True)[1].reshape(np.shape(u))


def _as4d(u):
    u = np.ascontiguousarray(u, dtype=np.float64)
    if u.ndim == 3:
        u = u[..., None]
    if u.ndim != 4:
        raise ValueError(f"expected a (nx, ny, nz[, C]) array, got shape {u.shape}")
    return u


def constraint_loss(u_set) -> float:
    """Magnitude of the mean displacement of a set of fields."""
    u_set = [np.asarray(u, dtype=np.float64) for u in u_set]
    if not u_set:
        raise ValueError("constraint needs at least one field")
    shape = u_set[0].shape
    if any(u.shape != shape for u in u_set):
        raise ValueError("constraint fields must share a shape")
    return magnitude_loss(_ordered_mean(u_set))


def _ordered_mean(u_set):
    # Fixed index-order reduction keeps results bit-reproducible.
    acc = np.zeros_like(u_set[0], dtype=np.float64)
    for u in u_set:
        acc += u
    return acc / len(u_set)


def total_loss(atlas_warped, image, u_inv, day_fields, a_g, weights: LossWeights = LossWeights()):
    """Per-image objective from already-computed fields."""
    return combine(
        lncc_sq_loss(atlas_warped, image, weights.ncc_window, weights.ncc_eps),
        constraint_loss(day_fields) if day_fields is not None and len(day_fields) else 0.0,
        magnitude_loss(u_inv),
        diffusion_loss(u_inv),
        magnitude_loss(a_g) if a_g is not None else 0.0,
        weights,
    )


def _check(term, *arrays):
    for x in arrays:
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(term)


def day_objective(a0, a_g, images, nus, weights: LossWeights = LossWeights(),
                  svf: SvfConfig = SvfConfig(), constraint="exact", stale_fields=None,
                  need_grad=True, workspace: Workspace | None = None):
    """Summed objective for the images of one day and its gradient.

    Parameters
    ----------
    a0, a_g : arrays (nx, ny, nz)
        Initial atlas and deviation for the day. The optimized atlas is
        their sum; clamping only happens when an atlas is materialized.
    images : list of arrays (nx, ny, nz)
    nus : list of velocity fields, one per image.
    constraint : {"exact", "running", None}
        ``"exact"`` uses the mean over all fields of the day. ``"running"``
        averages each field with the fixed ``stale_fields[k]`` (fields seen
        earlier in age order) and differentiates through the fresh one only.
        ``None`` drops the term, as when registering to a frozen atlas.
    need_grad : bool
        Skip the reverse pass when only the value is wanted.
    workspace : Workspace, optional
        Scratch memory reused across calls; saves re-allocating the
        integration intermediates.

    Returns
    -------
    breakdowns : list of LossBreakdown, one per image
    grad_nus : list of arrays or None
    grad_ag : array or None
    extras : dict with forward fields ``u`` (None without constraint) and ``u_inv``
    """
    if constraint not in ("exact", "running", None):
        raise ValueError(f"unknown constraint mode {constraint!r}")
    ws = workspace if workspace is not None else Workspace()
    atlas = np.asarray(a0, dtype=np.float64) + np.asarray(a_g, dtype=np.float64)
    _check("atlas", atlas)
    n_img = len(images)
    n_vox = atlas.size
    stack_shape = (svf.squaring_steps + 1,) + atlas.shape + (3,)
    held = []
    try:
        fwd = []
        if constraint:
            for nu in nus:
                buf = ws.take(stack_shape)
                held.append(buf)
                fwd.append(integrate_with_steps(nu, svf, out=buf)[1])
        us = [f[-1].copy() for f in fwd] if constraint else None

        if constraint == "exact":
            mean_u = _ordered_mean(us)
            c_vals = [magnitude_loss(mean_u)] * n_img
            c_grads = [2.0 * weights.constraint * mean_u / n_vox] * n_img
        elif constraint == "running":
            c_vals, c_grads = [], []
            stale_fields = stale_fields or [[] for _ in us]
            for k, u in enumerate(us):
                window = [u] + [np.asarray(f, dtype=np.float64) for f in stale_fields[k]]
                m = _ordered_mean(window)
                c_vals.append(magnitude_loss(m))
                c_grads.append(2.0 * weights.constraint * m / (n_vox * len(window)))
        else:
            c_vals, c_grads = [0.0] * n_img, None
        _check("constraint", np.asarray(c_vals))

        atlas_mag = magnitude_loss(a_g)
        breakdowns, uis = [], []
        grad_nus = [] if need_grad else None
        grad_ag = np.zeros_like(atlas) if need_grad else None
        a_vec = atlas[..., None]
        inv = ws.take(stack_shape)
        held.append(inv)
        work = (ws.take(atlas.shape + (3,)), ws.take(atlas.shape + (3,)))
        held.extend(work)
        for k in range(n_img):
            u_inv = integrate_with_steps(-np.asarray(nus[k], dtype=np.float64), svf, out=inv)[0]
            uis.append(u_inv.copy())
            warped = _trilinear.sample(a_vec, u_inv)[..., 0]
            sim, g_w = _fused.lncc(*_lncc_args(warped, images[k], weights.ncc_window, weights.ncc_eps), need_grad)
            _check("similarity", np.asarray(sim))
            mag = magnitude_loss(u_inv)
            dif, g_dif = _fused.diffusion(u_inv, need_grad)
            _check("deformation", np.asarray([mag, dif]))
            breakdowns.append(combine(float(sim), c_vals[k], mag, float(dif), atlas_mag, weights))
            if not need_grad:
                continue
            _check("similarity", g_w)
            g_atlas, g_uinv = _trilinear.sample_vjp(a_vec, u_inv, g_w[..., None])
            grad_ag += g_atlas[..., 0]
            g_uinv += weights.deformation * (magnitude_grad(u_inv) + g_dif)
            g_nu = -integrate_svf_vjp(inv, g_uinv, svf, work)
            if c_grads is not None and weights.constraint > 0:
                g_nu += integrate_svf_vjp(fwd[k], c_grads[k], svf, work)
            _check("gradient", g_nu)
            grad_nus.append(g_nu)
    finally:
        ws.give(*held)
    if need_grad:
        grad_ag += n_img * weights.atlas * magnitude_grad(a_g)
        _check("gradient", grad_ag)
    return breakdowns, grad_nus, grad_ag, {"u": us, "u_inv": uis}
