"""AdamW with decoupled weight decay, over named float64 parameter dicts."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Standard AdamW. Parameter order is the dict insertion order, which is
    fixed by the model constructors, so updates are bitwise deterministic."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            m_hat = m / bias1
            v_hat = v / bias2
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps))
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
