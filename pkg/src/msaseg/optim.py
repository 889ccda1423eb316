"""Decoupled weight-decay Adam (AdamW).

theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta), with decay
applied only to params flagged `decay` (weights; never LN params or biases).
"""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, tape, lr):
        """One update from the gradients stored on `tape`."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = tape.grad(p)
            m = self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            v = self._v[i] = b2 * self._v[i] + (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if p.decay and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)
