"""Adam with per-parameter moment slots, updating arrays in place."""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class Adam:
    def __init__(self, beta1=BETA1, beta2=BETA2, eps=EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params, grads, lr):
        """One update over `params` (name -> array, modified in place).

        `grads` must align by name; `lr` is a scalar or a name -> scalar
        map. lr 0 leaves the parameter bytes untouched (moments still
        advance).
        """
        for name in sorted(params):
            p = params[name]
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / (1.0 - self.beta1**t)
            vhat = v / (1.0 - self.beta2**t)
            rate = lr[name] if isinstance(lr, dict) else lr
            p -= rate * mhat / (np.sqrt(vhat) + self.eps)
