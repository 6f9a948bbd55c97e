"""Basin-weighted squared-error loss with a cross-timescale consistency penalty.

For timescales ``k = 1..K`` with predictions ``p_k`` and targets ``y_k`` of
shape ``(B, window_k)``::

    loss = 1/K * sum_k mean_{unmasked (b, t)} (p_k - y_k)^2 / (sigma_b + eps)^2
         + weight * sum_pairs mean_{(b, t)} (p_coarse - mean of its fine steps)^2

A pair of adjacent timescales with integer ratio ``r`` compares the trailing
``n = min(window_coarse, window_fine // r)`` coarse predictions with the block
means of the trailing ``n * r`` fine predictions. The penalty uses predictions
only, so target masks do not apply to it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_EPSILON = 0.1


class LossError(ValueError):
    pass


@dataclass
class LossBatch:
    predictions: List[np.ndarray]  # (B, window_k) per timescale, coarsest first
    targets: List[np.ndarray]  # same shapes; NaN marks missing
    sigma: np.ndarray  # (B,) per-sample basin discharge std, standardized units
    ratios: Tuple[int, ...]  # step ratio of timescale k to k + 1
    masks: Optional[List[np.ndarray]] = None  # True where the target counts

    def __post_init__(self):
        k = len(self.predictions)
        if k == 0 or len(self.targets) != k:
            raise LossError("need predictions and targets for every timescale")
        if len(self.ratios) != k - 1:
            raise LossError(f"need {k - 1} timescale ratios, got {len(self.ratios)}")
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        nb = self.sigma.shape[0]
        if self.masks is None:
            self.masks = [~np.isnan(y) for y in self.targets]
        for p, y, m in zip(self.predictions, self.targets, self.masks):
            if p.shape != y.shape or m.shape != p.shape or p.ndim != 2 or p.shape[0] != nb:
                raise LossError(f"inconsistent shapes: prediction {p.shape}, target {y.shape}, mask {m.shape}")

    def pair_steps(self, k: int) -> int:
        """Number of trailing coarse steps compared in pair ``(k, k + 1)``."""
        r = self.ratios[k]
        return min(self.predictions[k].shape[1], self.predictions[k + 1].shape[1] // r)


def _nse_term(batch: LossBatch, epsilon: float, grads: List[np.ndarray]) -> float:
    weight = 1.0 / (batch.sigma + epsilon) ** 2
    terms = []
    for k, (p, y, m) in enumerate(zip(batch.predictions, batch.targets, batch.masks)):
        count = int(m.sum())
        if count == 0:
            terms.append(None)
            continue
        err = np.where(m, p - np.where(m, y, 0.0), 0.0)
        terms.append((float(np.sum(weight[:, None] * err * err)) / count, 2.0 * weight[:, None] * err / count))
    active = [t for t in terms if t is not None]
    if not active:
        raise LossError("every target in the batch is masked; loss undefined")
    for k, t in enumerate(terms):
        if t is not None:
            grads[k] += t[1] / len(active)
    return sum(t[0] for t in active) / len(active)


def _reg_term(batch: LossBatch, grads: List[np.ndarray]) -> float:
    total = 0.0
    for k, r in enumerate(batch.ratios):
        n = batch.pair_steps(k)
        if n == 0:
            continue
        coarse = batch.predictions[k][:, -n:]
        fine = batch.predictions[k + 1][:, -n * r:]
        nb = coarse.shape[0]
        diff = coarse - fine.reshape(nb, n, r).mean(axis=2)
        scale = 1.0 / (nb * n)
        total += float(np.sum(diff * diff)) * scale
        grads[k][:, -n:] += 2.0 * scale * diff
        grads[k + 1][:, -n * r:] -= np.repeat(2.0 * scale / r * diff, r, axis=1)
    return total


def nse_reg_loss(batch: LossBatch, epsilon: float = DEFAULT_EPSILON,
                 regularization_weight: float = 1.0) -> Tuple[float, List[np.ndarray]]:
    """Loss value and its gradient with respect to every prediction array."""
    if epsilon <= 0:
        raise LossError("epsilon must be positive")
    grads = [np.zeros(p.shape, dtype=np.float64) for p in batch.predictions]
    loss = _nse_term(batch, epsilon, grads)
    if regularization_weight:
        reg_grads = [np.zeros_like(g) for g in grads]
        loss += regularization_weight * _reg_term(batch, reg_grads)
        for g, rg in zip(grads, reg_grads):
            g += regularization_weight * rg
    return loss, grads


def nse_loss(batch: LossBatch, epsilon: float = DEFAULT_EPSILON) -> Tuple[float, List[np.ndarray]]:
    return nse_reg_loss(batch, epsilon, 0.0)


def consistency_penalty(batch: LossBatch) -> float:
    """Unweighted penalty term alone (for logging)."""
    return _reg_term(batch, [np.zeros(p.shape) for p in batch.predictions])
