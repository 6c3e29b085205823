"""Fused compiled loops for the per-iteration loss terms and the optimizer.

Each function here replaces a chain of whole-array numpy passes with one or
two sweeps. The plain-numpy definitions in ``objective`` and ``optim`` stay
the reference; tests compare the two.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, boundscheck=False, fastmath=False, error_model="numpy")


@njit(**_JIT)
def _running_sum(x, out, r):
    # Window sums of half-width r along axis 1 of a (P, L, Q) array, zero padded.
    P, L, Q = x.shape
    s = np.empty(Q)
    for p in range(P):
        for q in range(Q):
            s[q] = 0.0
        for l in range(min(r, L)):
            for q in range(Q):
                s[q] += x[p, l, q]
        for l in range(L):
            hi = l + r
            if hi < L:
                for q in range(Q):
                    s[q] += x[p, hi, q]
            for q in range(Q):
                out[p, l, q] = s[q]
            lo = l - r
            if lo >= 0:
                for q in range(Q):
                    s[q] -= x[p, lo, q]


@njit(**_JIT)
def box_sum(x, w):
    """Zero-padded ``w**3`` window sums of a C-contiguous channel-last (nx, ny, nz, C) array."""
    nx, ny, nz, nc = x.shape
    r = w // 2
    a = np.empty_like(x)
    b = np.empty_like(x)
    _running_sum(x.reshape(1, nx, ny * nz * nc), a.reshape(1, nx, ny * nz * nc), r)
    _running_sum(a.reshape(nx, ny, nz * nc), b.reshape(nx, ny, nz * nc), r)
    _running_sum(b.reshape(nx * ny, nz, nc), a.reshape(nx * ny, nz, nc), r)
    return a


@njit(**_JIT)
def lncc(a, b, cnt, w, eps, need_grad):
    """Loss ``-mean(cross^2 / (va * vb + eps))`` and, if asked, its gradient w.r.t. ``a``."""
    nx, ny, nz = a.shape
    stack = np.empty((nx, ny, nz, 5))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                av = a[i, j, k]
                bv = b[i, j, k]
                stack[i, j, k, 0] = av
                stack[i, j, k, 1] = bv
                stack[i, j, k, 2] = av * bv
                stack[i, j, k, 3] = av * av
                stack[i, j, k, 4] = bv * bv
    s = box_sum(stack, w)
    n = nx * ny * nz
    total = 0.0
    back = np.empty((nx, ny, nz, 3)) if need_grad else np.empty((0, 0, 0, 3))
    scale = -1.0 / n
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                c = cnt[i, j, k]
                sa = s[i, j, k, 0]
                sb = s[i, j, k, 1]
                cross = s[i, j, k, 2] - sa * sb / c
                va = s[i, j, k, 3] - sa * sa / c
                vb = s[i, j, k, 4] - sb * sb / c
                denom = va * vb + eps
                cc = cross * cross / denom
                total += cc
                if need_grad:
                    g_cross = scale * 2.0 * cross / denom
                    g_va = -scale * cc * vb / denom
                    back[i, j, k, 0] = -g_cross * sb / c - 2.0 * g_va * sa / c
                    back[i, j, k, 1] = g_va
                    back[i, j, k, 2] = g_cross
    grad = np.empty((nx, ny, nz)) if need_grad else np.empty((0, 0, 0))
    if need_grad:
        bs = box_sum(back, w)
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    grad[i, j, k] = bs[i, j, k, 0] + 2.0 * a[i, j, k] * bs[i, j, k, 1] + b[i, j, k] * bs[i, j, k, 2]
    return -total / n, grad


@njit(**_JIT)
def diffusion(u, need_grad):
    """Sum of squared forward differences over ``u.size`` and its gradient."""
    nx, ny, nz, nc = u.shape
    scale = 1.0 / u.size
    total = 0.0
    grad = np.zeros_like(u) if need_grad else np.zeros((0, 0, 0, nc))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                for c in range(nc):
                    v = u[i, j, k, c]
                    if i + 1 < nx:
                        d = u[i + 1, j, k, c] - v
                        total += d * d
                        if need_grad:
                            grad[i + 1, j, k, c] += 2.0 * d * scale
                            grad[i, j, k, c] -= 2.0 * d * scale
                    if j + 1 < ny:
                        d = u[i, j + 1, k, c] - v
                        total += d * d
                        if need_grad:
                            grad[i, j + 1, k, c] += 2.0 * d * scale
                            grad[i, j, k, c] -= 2.0 * d * scale
                    if k + 1 < nz:
                        d = u[i, j, k + 1, c] - v
                        total += d * d
                        if need_grad:
                            grad[i, j, k + 1, c] += 2.0 * d * scale
                            grad[i, j, k, c] -= 2.0 * d * scale
    return total * scale, grad


@njit(**_JIT)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.size):
        gi = gf[i]
        mi = beta1 * mf[i] + (1.0 - beta1) * gi
        vi = beta2 * vf[i] + (1.0 - beta2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        pf[i] -= lr / c1 * mi / (np.sqrt(vi / c2) + eps)
