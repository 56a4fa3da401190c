"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from ..errors import GraphError, MixedAEError
from .autodiff import Parameter


class Adam:
    """Standard Adam: m/v moment tracking, bias-corrected step.

    Frozen parameters are skipped entirely: their value and their moments
    stay untouched so alternating-phase training does not corrupt state.
    """

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.frozen:
                continue
            g = p.grad
            if g is None:
                raise GraphError(f"parameter {p.name or i} has no gradient; run backward first")
            if not np.all(np.isfinite(g)):
                raise MixedAEError(f"non-finite gradient for parameter {p.name or i}")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / (1.0 - self.beta1**t)
            v_hat = self._v[i] / (1.0 - self.beta2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
