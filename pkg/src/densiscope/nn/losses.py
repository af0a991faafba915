"""Mean absolute percentage error with a floored denominator."""

from __future__ import annotations

import numpy as np


def mape_loss(pred: np.ndarray, target: np.ndarray,
              target_floor: float = 0.01) -> tuple[float, np.ndarray]:
    """MAPE in percent, plus its gradient with respect to ``pred``.

        loss = (100 / N) * sum |pred - target| / max(target, floor)

    Ground-truth densities can be exactly zero (fully fatty slices); the
    floor keeps the loss finite there. The subgradient of |.| at 0 is 0.
    """
    pred = np.asarray(pred, dtype=np.result_type(pred, np.float32)).reshape(-1)
    target = np.asarray(target, dtype=pred.dtype).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"pred and target differ in length: {pred.shape} vs {target.shape}")
    denom = np.maximum(target, target_floor)
    diff = pred - target
    n = pred.shape[0]
    loss = float(100.0 / n * np.sum(np.abs(diff) / denom))
    grad = (100.0 / n) * np.sign(diff) / denom
    return loss, grad.astype(pred.dtype)
