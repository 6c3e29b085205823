"""Compiled trilinear sampling kernels with zero padding.

Arrays are channel-last: fields have shape (nx, ny, nz, C) and displacements
(nx, ny, nz, 3), both float64. A displacement ``d`` samples ``f`` at
``x + d(x)`` in voxel coordinates. Corners that fall outside the grid
contribute zero.

``sample``/``sample_vjp`` are the general pair. ``compose_self`` and
``compose_self_vjp`` fuse one scaling-and-squaring step ``u + u(x + u)`` and
its adjoint; they dominate optimization time, hence the hand-unrolled
interior paths. Cells touching the border go through the slower
``_edge_*`` helpers.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, boundscheck=False, fastmath=True, error_model="numpy")


@njit(**_JIT)
def _edge_interp(f, out, i, j, k, px, py, pz):
    # Adds f(px, py, pz) into out[i, j, k, :] for cells that straddle the border.
    nx, ny, nz, nc = f.shape
    if not (px > -1.0 and py > -1.0 and pz > -1.0 and px < nx and py < ny and pz < nz):
        return
    x0 = int(px + 1.0) - 1
    y0 = int(py + 1.0) - 1
    z0 = int(pz + 1.0) - 1
    fx = px - x0
    fy = py - y0
    fz = pz - z0
    for a in range(2):
        xi = x0 + a
        if xi < 0 or xi >= nx:
            continue
        wx = fx if a == 1 else 1.0 - fx
        for b in range(2):
            yi = y0 + b
            if yi < 0 or yi >= ny:
                continue
            wy = fy if b == 1 else 1.0 - fy
            for e in range(2):
                zi = z0 + e
                if zi < 0 or zi >= nz:
                    continue
                w = wx * wy * (fz if e == 1 else 1.0 - fz)
                for c in range(nc):
                    out[i, j, k, c] += w * f[xi, yi, zi, c]


@njit(**_JIT)
def _edge_interp_vjp(f, g, gf, gd, i, j, k, px, py, pz):
    # Border-cell adjoint: scatter g[i, j, k] into gf, add coordinate gradient to gd[i, j, k].
    nx, ny, nz, nc = f.shape
    if not (px > -1.0 and py > -1.0 and pz > -1.0 and px < nx and py < ny and pz < nz):
        return
    x0 = int(px + 1.0) - 1
    y0 = int(py + 1.0) - 1
    z0 = int(pz + 1.0) - 1
    fx = px - x0
    fy = py - y0
    fz = pz - z0
    dx = 0.0
    dy = 0.0
    dz = 0.0
    for a in range(2):
        xi = x0 + a
        if xi < 0 or xi >= nx:
            continue
        wx = fx if a == 1 else 1.0 - fx
        sx = 1.0 if a == 1 else -1.0
        for b in range(2):
            yi = y0 + b
            if yi < 0 or yi >= ny:
                continue
            wy = fy if b == 1 else 1.0 - fy
            sy = 1.0 if b == 1 else -1.0
            for e in range(2):
                zi = z0 + e
                if zi < 0 or zi >= nz:
                    continue
                wz = fz if e == 1 else 1.0 - fz
                sz = 1.0 if e == 1 else -1.0
                s = 0.0
                for c in range(nc):
                    o = g[i, j, k, c]
                    gf[xi, yi, zi, c] += wx * wy * wz * o
                    s += o * f[xi, yi, zi, c]
                dx += sx * wy * wz * s
                dy += wx * sy * wz * s
                dz += wx * wy * sz * s
    gd[i, j, k, 0] += dx
    gd[i, j, k, 1] += dy
    gd[i, j, k, 2] += dz


@njit(**_JIT)
def sample(f, d):
    """Trilinear samples of every channel of ``f`` at ``x + d(x)``."""
    nx, ny, nz, nc = f.shape
    out = np.zeros((nx, ny, nz, nc))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = i + d[i, j, k, 0]
                py = j + d[i, j, k, 1]
                pz = k + d[i, j, k, 2]
                if px > -1.0 and py > -1.0 and pz > -1.0 and px < nx and py < ny and pz < nz:
                    x0 = int(px + 1.0) - 1
                    y0 = int(py + 1.0) - 1
                    z0 = int(pz + 1.0) - 1
                    if x0 >= 0 and y0 >= 0 and z0 >= 0 and x0 < nx - 1 and y0 < ny - 1 and z0 < nz - 1:
                        fx = px - x0
                        fy = py - y0
                        fz = pz - z0
                        gx = 1.0 - fx
                        gy = 1.0 - fy
                        gz = 1.0 - fz
                        for c in range(nc):
                            out[i, j, k, c] = (
                                gx * (gy * (gz * f[x0, y0, z0, c] + fz * f[x0, y0, z0 + 1, c])
                                      + fy * (gz * f[x0, y0 + 1, z0, c] + fz * f[x0, y0 + 1, z0 + 1, c]))
                                + fx * (gy * (gz * f[x0 + 1, y0, z0, c] + fz * f[x0 + 1, y0, z0 + 1, c])
                                        + fy * (gz * f[x0 + 1, y0 + 1, z0, c] + fz * f[x0 + 1, y0 + 1, z0 + 1, c]))
                            )
                    else:
                        _edge_interp(f, out, i, j, k, px, py, pz)
    return out


@njit(**_JIT)
def sample_vjp(f, d, g):
    """Adjoint of ``sample``: returns (df, dd) for upstream gradient ``g``."""
    nx, ny, nz, nc = f.shape
    gf = np.zeros((nx, ny, nz, nc))
    gd = np.zeros((nx, ny, nz, 3))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = i + d[i, j, k, 0]
                py = j + d[i, j, k, 1]
                pz = k + d[i, j, k, 2]
                if not (px > -1.0 and py > -1.0 and pz > -1.0 and px < nx and py < ny and pz < nz):
                    continue
                x0 = int(px + 1.0) - 1
                y0 = int(py + 1.0) - 1
                z0 = int(pz + 1.0) - 1
                if x0 >= 0 and y0 >= 0 and z0 >= 0 and x0 < nx - 1 and y0 < ny - 1 and z0 < nz - 1:
                    fx = px - x0
                    fy = py - y0
                    fz = pz - z0
                    gx = 1.0 - fx
                    gy = 1.0 - fy
                    gz = 1.0 - fz
                    dx = 0.0
                    dy = 0.0
                    dz = 0.0
                    for c in range(nc):
                        o = g[i, j, k, c]
                        gf[x0, y0, z0, c] += gx * gy * gz * o
                        gf[x0, y0, z0 + 1, c] += gx * gy * fz * o
                        gf[x0, y0 + 1, z0, c] += gx * fy * gz * o
                        gf[x0, y0 + 1, z0 + 1, c] += gx * fy * fz * o
                        gf[x0 + 1, y0, z0, c] += fx * gy * gz * o
                        gf[x0 + 1, y0, z0 + 1, c] += fx * gy * fz * o
                        gf[x0 + 1, y0 + 1, z0, c] += fx * fy * gz * o
                        gf[x0 + 1, y0 + 1, z0 + 1, c] += fx * fy * fz * o
                        v000 = f[x0, y0, z0, c]
                        v001 = f[x0, y0, z0 + 1, c]
                        v010 = f[x0, y0 + 1, z0, c]
                        v011 = f[x0, y0 + 1, z0 + 1, c]
                        v100 = f[x0 + 1, y0, z0, c]
                        v101 = f[x0 + 1, y0, z0 + 1, c]
                        v110 = f[x0 + 1, y0 + 1, z0, c]
                        v111 = f[x0 + 1, y0 + 1, z0 + 1, c]
                        dx += o * (gy * gz * (v100 - v000) + gy * fz * (v101 - v001)
                                   + fy * gz * (v110 - v010) + fy * fz * (v111 - v011))
                        dy += o * (gx * gz * (v010 - v000) + gx * fz * (v011 - v001)
                                   + fx * gz * (v110 - v100) + fx * fz * (v111 - v101))
                        dz += o * (gx * gy * (v001 - v000) + gx * fy * (v011 - v010)
                                   + fx * gy * (v101 - v100) + fx * fy * (v111 - v110))
                    gd[i, j, k, 0] = dx
                    gd[i, j, k, 1] = dy
                    gd[i, j, k, 2] = dz
                else:
                    _edge_interp_vjp(f, g, gf, gd, i, j, k, px, py, pz)
    return gf, gd


@njit(**_JIT)
def _copy(src, dst):
    # Flat copy; much cheaper than ``dst[...] = src`` under numba.
    s = src.reshape(-1)
    d = dst.reshape(-1)
    for i in range(s.size):
        d[i] = s[i]


@njit(**_JIT)
def compose_self_into(u, out):
    """One squaring step written to ``out`` (must not alias ``u``): ``u(x) + u(x + u(x))``."""
    nx, ny, nz, _ = u.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                ux = u[i, j, k, 0]
                uy = u[i, j, k, 1]
                uz = u[i, j, k, 2]
                px = i + ux
                py = j + uy
                pz = k + uz
                if not (px > -1.0 and py > -1.0 and pz > -1.0 and px < nx and py < ny and pz < nz):
                    out[i, j, k, 0] = ux
                    out[i, j, k, 1] = uy
                    out[i, j, k, 2] = uz
                    continue
                x0 = int(px + 1.0) - 1
                y0 = int(py + 1.0) - 1
                z0 = int(pz + 1.0) - 1
                if x0 >= 0 and y0 >= 0 and z0 >= 0 and x0 < nx - 1 and y0 < ny - 1 and z0 < nz - 1:
                    fx = px - x0
                    fy = py - y0
                    fz = pz - z0
                    gx = 1.0 - fx
                    gy = 1.0 - fy
                    gz = 1.0 - fz
                    w000 = gx * gy * gz
                    w001 = gx * gy * fz
                    w010 = gx * fy * gz
                    w011 = gx * fy * fz
                    w100 = fx * gy * gz
                    w101 = fx * gy * fz
                    w110 = fx * fy * gz
                    w111 = fx * fy * fz
                    r0 = ux
                    r1 = uy
                    r2 = uz
                    for c in range(3):
                        v = (w000 * u[x0, y0, z0, c] + w001 * u[x0, y0, z0 + 1, c]
                             + w010 * u[x0, y0 + 1, z0, c] + w011 * u[x0, y0 + 1, z0 + 1, c]
                             + w100 * u[x0 + 1, y0, z0, c] + w101 * u[x0 + 1, y0, z0 + 1, c]
                             + w110 * u[x0 + 1, y0 + 1, z0, c] + w111 * u[x0 + 1, y0 + 1, z0 + 1, c])
                        if c == 0:
                            r0 += v
                        elif c == 1:
                            r1 += v
                        else:
                            r2 += v
                    out[i, j, k, 0] = r0
                    out[i, j, k, 1] = r1
                    out[i, j, k, 2] = r2
                else:
                    out[i, j, k, 0] = ux
                    out[i, j, k, 1] = uy
                    out[i, j, k, 2] = uz
                    _edge_interp(u, out, i, j, k, px, py, pz)
    return out


@njit(**_JIT)
def compose_self_vjp_into(u, g, out):
    """Gradient w.r.t. ``u`` of ``<g, compose_self(u)>``, written to ``out`` (must not alias ``g``)."""
    nx, ny, nz, _ = u.shape
    _copy(g, out)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = i + u[i, j, k, 0]
                py = j + u[i, j, k, 1]
                pz = k + u[i, j, k, 2]
                if not (px > -1.0 and py > -1.0 and pz > -1.0 and px < nx and py < ny and pz < nz):
                    continue
                x0 = int(px + 1.0) - 1
                y0 = int(py + 1.0) - 1
                z0 = int(pz + 1.0) - 1
                if x0 >= 0 and y0 >= 0 and z0 >= 0 and x0 < nx - 1 and y0 < ny - 1 and z0 < nz - 1:
                    fx = px - x0
                    fy = py - y0
                    fz = pz - z0
                    gx = 1.0 - fx
                    gy = 1.0 - fy
                    gz = 1.0 - fz
                    w000 = gx * gy * gz
                    w001 = gx * gy * fz
                    w010 = gx * fy * gz
                    w011 = gx * fy * fz
                    w100 = fx * gy * gz
                    w101 = fx * gy * fz
                    w110 = fx * fy * gz
                    w111 = fx * fy * fz
                    s000 = 0.0
                    s001 = 0.0
                    s010 = 0.0
                    s011 = 0.0
                    s100 = 0.0
                    s101 = 0.0
                    s110 = 0.0
                    s111 = 0.0
                    for c in range(3):
                        o = g[i, j, k, c]
                        out[x0, y0, z0, c] += w000 * o
                        out[x0, y0, z0 + 1, c] += w001 * o
                        out[x0, y0 + 1, z0, c] += w010 * o
                        out[x0, y0 + 1, z0 + 1, c] += w011 * o
                        out[x0 + 1, y0, z0, c] += w100 * o
                        out[x0 + 1, y0, z0 + 1, c] += w101 * o
                        out[x0 + 1, y0 + 1, z0, c] += w110 * o
                        out[x0 + 1, y0 + 1, z0 + 1, c] += w111 * o
                        s000 += o * u[x0, y0, z0, c]
                        s001 += o * u[x0, y0, z0 + 1, c]
                        s010 += o * u[x0, y0 + 1, z0, c]
                        s011 += o * u[x0, y0 + 1, z0 + 1, c]
                        s100 += o * u[x0 + 1, y0, z0, c]
                        s101 += o * u[x0 + 1, y0, z0 + 1, c]
                        s110 += o * u[x0 + 1, y0 + 1, z0, c]
                        s111 += o * u[x0 + 1, y0 + 1, z0 + 1, c]
                    out[i, j, k, 0] += (gy * gz * (s100 - s000) + gy * fz * (s101 - s001)
                                        + fy * gz * (s110 - s010) + fy * fz * (s111 - s011))
                    out[i, j, k, 1] += (gx * gz * (s010 - s000) + gx * fz * (s011 - s001)
                                        + fx * gz * (s110 - s100) + fx * fz * (s111 - s101))
                    out[i, j, k, 2] += (gx * gy * (s001 - s000) + gx * fy * (s011 - s010)
                                        + fx * gy * (s101 - s100) + fx * fy * (s111 - s110))
                else:
                    # g is read-only here, so out can take both the scatter and the coordinate term.
                    _edge_interp_vjp(u, g, out, out, i, j, k, px, py, pz)
    return out


def compose_self(u):
    return compose_self_into(u, np.empty_like(u))


def compose_self_vjp(u, g):
    return compose_self_vjp_into(u, g, np.empty_like(g))
