"""Stationary velocity fields: scaling and squaring, composition, Jacobians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _trilinear


@dataclass(frozen=True)
class SvfConfig:
    squaring_steps: int = 7

    def __post_init__(self):
        if not 0 <= self.squaring_steps <= 16:
            raise ValueError(f"squaring_steps must be in [0, 16], got {self.squaring_steps}")


def _as_field(u):
    u = np.ascontiguousarray(u, dtype=np.float64)
    if u.ndim != 4 or u.shape[-1] != 3:
        raise ValueError(f"expected a (nx, ny, nz, 3) field, got shape {u.shape}")
    return u


def compose(u_a, u_b):
    """Displacement of ``phi_a o phi_b``: ``u_b(x) + u_a(x + u_b(x))``."""
    u_a = _as_field(u_a)
    u_b = _as_field(u_b)
    if u_a.shape != u_b.shape:
        raise ValueError(f"field shapes differ: {u_a.shape} vs {u_b.shape}")
    return u_b + _trilinear.sample(u_a, u_b)


def integrate_svf(nu, cfg: SvfConfig = SvfConfig()):
    """Displacement of ``exp(nu)`` by scaling and squaring."""
    nu = _as_field(nu)
    if not np.all(np.isfinite(nu)):
        raise ValueError("velocity field contains non-finite values")
    u = nu / 2.0 ** cfg.squaring_steps
    for _ in range(cfg.squaring_steps):
        u = _trilinear.compose_self(u)
    return u


def _integrate(nu, cfg, out=None):
    # Returns every intermediate displacement; the reverse pass needs them.
    nu = _as_field(nu)
    if not np.all(np.isfinite(nu)):
        raise ValueError("velocity field contains non-finite values")
    T = cfg.squaring_steps
    steps = np.empty((T + 1,) + nu.shape) if out is None else out
    np.multiply(nu, 1.0 / 2.0 ** T, out=steps[0])
    for k in range(T):
        _trilinear.compose_self_into(steps[k], steps[k + 1])
    return steps


def integrate_svf_vjp(steps, g, cfg: SvfConfig = SvfConfig(), work=None):
    """Pull the gradient ``g`` w.r.t. the final displacement back to the velocity.

    ``steps`` is the stack returned by the forward pass (see
    ``integrate_with_steps``). ``work`` optionally supplies two scratch
    fields of the same shape as ``g``.
    """
    g = np.ascontiguousarray(g, dtype=np.float64)
    if work is None:
        work = (np.empty_like(g), np.empty_like(g))
    cur = g
    for k, u in enumerate(steps[-2::-1]):
        nxt = work[k % 2]
        _trilinear.compose_self_vjp_into(u, cur, nxt)
        cur = nxt
    return cur / 2.0 ** cfg.squaring_steps


def integrate_with_steps(nu, cfg: SvfConfig = SvfConfig(), out=None):
    """Like ``integrate_svf`` but also returns the intermediates for ``integrate_svf_vjp``.

    ``out`` may be a preallocated ``(squaring_steps + 1, nx, ny, nz, 3)`` array.
    """
    steps = _integrate(nu, cfg, out)
    return steps[-1], steps


class Workspace:
    """Reusable step stacks and scratch fields for repeated integrations of one grid size."""

    def __init__(self):
        self._free = {}

    def take(self, shape):
        pool = self._free.setdefault(tuple(shape), [])
        return pool.pop() if pool else np.empty(shape)

    def give(self, *arrays):
        for a in arrays:
            self._free.setdefault(a.shape, []).append(a)


def inverse_pair(nu, cfg: SvfConfig = SvfConfig()):
    """Forward and inverse displacements from integrating ``nu`` and ``-nu``."""
    nu = _as_field(nu)
    return integrate_svf(nu, cfg), integrate_svf(-nu, cfg)


def jacobian_matrix(u):
    """Per-voxel ``I + grad u``, shape (nx, ny, nz, 3, 3), entry [c, a] = d phi_c / d x_a.

    Central differences inside, one-sided at the boundary.
    """
    u = _as_field(u)
    jac = np.empty(u.shape[:3] + (3, 3))
    for c in range(3):
        for a in range(3):
            if u.shape[a] > 1:
                jac[..., c, a] = np.gradient(u[..., c], axis=a, edge_order=1)
            else:
                jac[..., c, a] = 0.0
        jac[..., c, c] += 1.0
    return jac


def jacobian_det(u):
    """Jacobian determinant of ``x -> x + u(x)`` at every voxel."""
    m = jacobian_matrix(u)
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def frac_nonpos_jacobian(u, mask) -> float:
    """Percentage of voxels in ``mask`` whose Jacobian determinant is <= 0."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask is empty")
    det = jacobian_det(u)
    return 100.0 * np.count_nonzero(det[mask] <= 0) / count


def interior_mask(shape, margin: int = 1):
    """Boolean mask excluding ``margin`` voxels at every face."""
    m = np.zeros(shape, dtype=bool)
    m[tuple(slice(margin, s - margin) for s in shape)] = True
    return m


def smooth_random_field(shape, max_magnitude, sigma, rng):
    """Gaussian-smoothed white noise scaled so the largest vector norm is ``max_magnitude``."""
    from scipy.ndimage import gaussian_filter

    noise = rng.standard_normal(tuple(shape) + (3,))
    field = np.stack([gaussian_filter(noise[..., c], sigma, mode="constant") for c in range(3)], axis=-1)
    peak = np.sqrt((field ** 2).sum(-1)).max()
    if peak == 0:
        return field
    return field * (max_magnitude / peak)
