from __future__ import annotations

from typing import Mapping

import numpy as np


class Adam:
    """Adam with bias correction; updates the parameter dict in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray], names=None) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        names = list(grads) if names is None else list(names)
        sq = sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in names)
        gnorm = float(np.sqrt(sq))
        factor = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            factor = self.clip_norm / gnorm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in names:
            g = grads[k].astype(np.float32) * np.float32(factor)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            self.params[k] -= step.astype(np.float32)
        return gnorm
