"""3D grids: trilinear sampling, warping, resampling and cropping.

Scalar volumes are plain ``(nx, ny, nz)`` arrays. Displacement and velocity
fields are ``(nx, ny, nz, 3)`` arrays in voxel units of their own grid, with
component ``c`` acting along array axis ``c``. Sampling outside the grid
returns zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _trilinear

DAY_MIN = 56
DAY_MAX = 90


@dataclass
class Volume:
    """A scalar grid with isotropic spacing in mm and an optional gestational day."""

    data: np.ndarray
    spacing: float = 1.0
    day: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {self.data.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def _check_field(u, shape):
    u = np.asarray(u, dtype=np.float64)
    if u.shape != tuple(shape) + (3,):
        raise ValueError(f"field shape {u.shape} does not match grid {tuple(shape)}")
    return u


def trilinear_sample(vol, points):
    """Sample ``vol`` at continuous voxel coordinates.

    Parameters
    ----------
    vol : array, shape (nx, ny, nz)
    points : array, shape (..., 3)
        Voxel coordinates. Corners outside the grid count as zero.

    Returns
    -------
    array of shape ``points.shape[:-1]``
    """
    vol = np.asarray(vol, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    lead = p.shape[:-1]
    p = p.reshape(-1, 3)
    base = np.floor(p)
    frac = p - base
    base = base.astype(np.int64)
    out = np.zeros(len(p))
    shape = np.array(vol.shape)
    for corner in np.ndindex(2, 2, 2):
        off = np.array(corner)
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        out[ok] += w[ok] * vol[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    return out.reshape(lead)


def warp(vol, u):
    """Pull-back warp: ``out(x) = vol(x + u(x))``."""
    vol = np.asarray(vol, dtype=np.float64)
    u = _check_field(u, vol.shape)
    return _trilinear.sample(vol[..., None], u)[..., 0]


def warp_field(f, u):
    """Sample each component of vector field ``f`` at ``x + u(x)``."""
    f = np.asarray(f, dtype=np.float64)
    u = _check_field(u, f.shape[:3])
    return _trilinear.sample(np.ascontiguousarray(f), u)


def warp_mask(mask, u):
    """Warp a binary mask by linear interpolation followed by a 0.5 threshold."""
    mask = np.asarray(mask, dtype=bool)
    return warp(mask.astype(np.float64), u) >= 0.5


def identity_grid(shape):
    """Voxel coordinates of every grid point, shape (*shape, 3)."""
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def resample_to_spacing(vol: Volume, s_target: float) -> Volume:
    """Resample to a new isotropic spacing, keeping the physical origin.

    Output voxel ``j`` sits at ``j * s_target`` mm and is sampled trilinearly
    from the input at ``j * s_target / spacing`` voxels. Points that land
    past the last input voxel by less than one voxel are clamped to it so a
    constant volume stays constant.
    """
    if not s_target > 0:
        raise ValueError(f"target spacing must be positive, got {s_target}")
    if np.isclose(s_target, vol.spacing, rtol=0, atol=1e-12):
        return replace(vol, data=vol.data.copy())
    old = np.array(vol.dims)
    new = np.maximum(1, np.round(old * vol.spacing / s_target).astype(int))
    ratio = s_target / vol.spacing
    coords = identity_grid(tuple(new)) * ratio
    coords = np.minimum(coords, old - 1)
    data = trilinear_sample(vol.data, coords).astype(vol.data.dtype, copy=False)
    return Volume(data, spacing=float(s_target), day=vol.day)


def center_crop_pad(vol, n: int):
    """Crop or zero-pad every axis symmetrically to length ``n``.

    Odd margins put the extra voxel on the high-index side, i.e. the low side
    gets ``floor(margin / 2)``. Accepts a ``Volume`` or a bare array.
    """
    if n <= 0:
        raise ValueError(f"target size must be positive, got {n}")
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    out = np.zeros((n, n, n) + data.shape[3:], dtype=data.dtype)
    src, dst = [], []
    for size in data.shape[:3]:
        if size >= n:
            lo = (size - n) // 2
            src.append(slice(lo, lo + n))
            dst.append(slice(0, n))
        else:
            lo = (n - size) // 2
            src.append(slice(0, size))
            dst.append(slice(lo, lo + size))
    out[tuple(dst)] = data[tuple(src)]
    if isinstance(vol, Volume):
        return Volume(out, spacing=vol.spacing, day=vol.day)
    return out


def spacing_for_day(t: float) -> float:
    """Isotropic voxel size in mm for gestational day ``t`` (valid on 56..90)."""
    if not DAY_MIN <= t <= DAY_MAX:
        raise ValueError(f"gestational day {t} outside the supported range [{DAY_MIN}, {DAY_MAX}]")
    return -0.3606 + 0.0084 * t


def normalize(data):
    """Min-max scale intensities to [0, 1]; constant inputs map to zero."""
    data = np.asarray(data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)
