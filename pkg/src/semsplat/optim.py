"""Adam with per-parameter learning rates and index remapping.

Moments live in float64; parameters may be float32 (scene) or float64
(heads). `remap` realigns the Gaussian-indexed moment arrays after
densification / pruning: surviving entries keep their moments, fresh entries
start at zero. The step counter is global per parameter key.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float | np.ndarray]):
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            self.t[key] += 1
            t = self.t[key]
            m = self.m[key]
            v = self.v[key]
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            update = lrs[key] * mhat / (np.sqrt(vhat) + self.eps)
            new = p.astype(np.float64) - update
            p[...] = new.astype(p.dtype)

    def remap(self, keys: list[str], remap_idx: np.ndarray):
        """Realign moments after a scene rebuild: remap_idx[i] = old row or -1."""
        fresh = remap_idx < 0
        safe = np.where(fresh, 0, remap_idx)
        for key in keys:
            for store in (self.m, self.v):
                old = store[key]
                new = old[safe].copy()
                new[fresh] = 0.0
                store[key] = new
