"""Adaptive-moment gradient descent on Tensor leaves."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard Adam. Moments kept in float64, parameters stay float32."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self._v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self._step = 0

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        """Apply one update using the gradient map from ``backward``.

        Parameters missing from the map are left untouched.
        """
        self._step += 1
        t = self._step
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            g64 = np.asarray(g, dtype=np.float64)
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g64
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g64 * g64
            m_hat = self._m[i] / bias1
            v_hat = self._v[i] / bias2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.data = np.asarray(p.data.astype(np.float64) - update, dtype=np.float32)
