import numpy as np

from . import _fused


class Adam:
    """Adam with per-key step counters.

    Parameters are updated in place. Each key keeps its own timestep so
    parameter groups stepped at different times (one per gestational day)
    get the correct bias correction.
    """

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, params, grads):
        for key, g in grads.items():
            p = params[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
                self.t[key] = 0
            self.t[key] += 1
            if p.dtype != np.float64 or not p.flags.c_contiguous:
                raise TypeError(f"parameter {key!r} must be a C-contiguous float64 array")
            _fused.adam_update(p, np.ascontiguousarray(g, dtype=np.float64), self.m[key], self.v[key],
                               self.lr, self.beta1, self.beta2, self.eps, self.t[key])
