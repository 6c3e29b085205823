"""Central finite differences of the per-day objective, one component at a time.

Perturbing one velocity only changes its own image terms and the shared
constraint; perturbing the deviation only changes the similarity and atlas
terms. The evaluators below recompute just those parts so that every
component can be checked in seconds. ``lean_matches_full`` confirms they
agree with the full objective.
"""

import numpy as np

from atlas4d import _trilinear
from atlas4d.diffeo import SvfConfig, integrate_svf
from atlas4d.objective import (LossWeights, day_objective, diffusion_loss, lncc_sq_loss,
                               magnitude_loss)

H = 1e-4
FLOOR = 1e-6


def random_instance(rng, n=8, n_images=2, nu_scale=0.8):
    a0 = rng.random((n, n, n))
    a_g = 0.1 * rng.standard_normal((n, n, n))
    images = [rng.random((n, n, n)) for _ in range(n_images)]
    nus = [nu_scale * rng.standard_normal((n, n, n, 3)) for _ in range(n_images)]
    return a0, a_g, images, nus


class Lean:
    def __init__(self, a0, a_g, images, nus, weights=LossWeights(), svf=SvfConfig()):
        self.a0, self.a_g, self.images, self.nus = a0, a_g, images, nus
        self.w, self.svf = weights, svf
        self.n = len(images)
        self.us = [integrate_svf(nu, svf) for nu in nus]
        self.uis = [integrate_svf(-nu, svf) for nu in nus]

    def _sim(self, atlas, k, u_inv):
        warped = _trilinear.sample(atlas[..., None], u_inv)[..., 0]
        return lncc_sq_loss(warped, self.images[k], self.w.ncc_window, self.w.ncc_eps)

    def velocity(self, k, nu):
        u, ui = integrate_svf(nu, self.svf), integrate_svf(-nu, self.svf)
        fields = list(self.us)
        fields[k] = u
        mean = sum(fields) / self.n
        return (self._sim(self.a0 + self.a_g, k, ui)
                + self.w.deformation * (magnitude_loss(ui) + diffusion_loss(ui))
                + self.n * self.w.constraint * magnitude_loss(mean))

    def deviation(self, a_g):
        atlas = self.a0 + a_g
        sims = sum(self._sim(atlas, k, self.uis[k]) for k in range(self.n))
        return sims + self.n * self.w.atlas * magnitude_loss(a_g)


def rel_error(analytic, fd):
    return abs(analytic - fd) / max(abs(analytic), abs(fd), FLOOR)


def component_errors(a0, a_g, images, nus, weights=LossWeights(), h=H):
    """Relative error of every velocity and deviation component.

    Returns ``(errors, probe)``: ``errors`` is a flat array in the order
    velocities then deviation, and ``probe(i, step)`` gives the one-sided
    forward and backward differences of component ``i`` at ``step``.
    """
    _, grad_nus, grad_ag, _ = day_objective(a0, a_g, images, nus, weights)
    lean = Lean(a0, a_g, images, nus, weights)
    slots = [(k, idx) for k, nu in enumerate(nus) for idx in np.ndindex(nu.shape)]
    slots += [(None, idx) for idx in np.ndindex(a_g.shape)]

    def value(i, step):
        k, idx = slots[i]
        base = nus[k] if k is not None else a_g
        x = base.copy()
        x[idx] += step
        return lean.velocity(k, x) if k is not None else lean.deviation(x)

    def analytic(i):
        k, idx = slots[i]
        return grad_nus[k][idx] if k is not None else grad_ag[idx]

    errors = np.array([rel_error(analytic(i), (value(i, h) - value(i, -h)) / (2 * h)) for i in range(len(slots))])

    def probe(i, step):
        f0 = value(i, 0.0)
        return (value(i, step) - f0) / step, (f0 - value(i, -step)) / step, analytic(i)

    return errors, probe


def check_all_components(a0, a_g, images, nus, weights=LossWeights()):
    """Worst relative error over every velocity and deviation component."""
    return float(component_errors(a0, a_g, images, nus, weights)[0].max())


def lean_matches_full(a0, a_g, images, nus, weights=LossWeights(), rng=None, count=5):
    """Largest gap between lean and full finite differences on a few components."""
    rng = rng or np.random.default_rng(0)
    lean = Lean(a0, a_g, images, nus, weights)

    def full(ag, vs):
        b, _, _, _ = day_objective(a0, ag, images, vs, weights, need_grad=False)
        return sum(x.total for x in b)

    gap = 0.0
    for _ in range(count):
        k = int(rng.integers(len(nus)))
        idx = tuple(int(i) for i in rng.integers(0, a0.shape[0], 3)) + (int(rng.integers(3)),)
        p = [v.copy() for v in nus]
        p[k][idx] += H
        m = [v.copy() for v in nus]
        m[k][idx] -= H
        gap = max(gap, abs((full(a_g, p) - full(a_g, m)) - (lean.velocity(k, p[k]) - lean.velocity(k, m[k]))) / (2 * H))
        j = idx[:3]
        pa, ma = a_g.copy(), a_g.copy()
        pa[j] += H
        ma[j] -= H
        gap = max(gap, abs((full(pa, nus) - full(ma, nus)) - (lean.deviation(pa) - lean.deviation(ma))) / (2 * H))
    return gap
