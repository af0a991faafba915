"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from ..exceptions import NumericsError


class Adam:
    """Standard Adam over a flat name -> array parameter table.

    Parameters are updated in place so layers holding the same arrays see
    every step. Moment accumulators mirror the parameter shapes.
    """

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """Apply one bias-corrected update from ``grads`` (same keys as params)."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericsError(
                    f"non-finite gradient for '{name}' at optimizer step {t}")
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for '{name}'")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= (self.learning_rate / bc1) * m / (np.sqrt(v / bc2) + self.epsilon)
