"""Evaluation metrics for trained flows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flows import FlowModel, intermediate_outputs, model_forward, model_inverse
from .otoracle import GaussianParams, mle_gaussian_fit


@dataclass
class CostBreakdown:
    per_flow: np.ndarray
    total: float

    def spread(self):
        """Largest relative deviation of a per-flow cost from their mean."""
        m = self.per_flow.mean()
        return float(np.max(np.abs(self.per_flow - m)) / m) if m > 0 else 0.0


def elementary_costs(model: FlowModel, x) -> CostBreakdown:
    """Mean squared displacement spent by each flow on the points ``x``."""
    outs = [o.value for o in intermediate_outputs(model, x)]
    per_flow = np.array([np.mean(np.sum((b - a) ** 2, axis=1)) for a, b in zip(outs, outs[1:])])
    return CostBreakdown(per_flow, float(np.sum(per_flow)))


def barycenter_mse(estimate_samples, reference: GaussianParams):
    """``(||a - a_hat||^2, ||S - S_hat||_F^2)`` with MLE estimates from the samples."""
    fit = mle_gaussian_fit(estimate_samples)
    mse_mean = float(np.sum((reference.mean - fit.mean) ** 2))
    mse_cov = float(np.sum((reference.cov - fit.cov) ** 2))
    return mse_mean, mse_cov


def _unit_rows(a, what):
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm vector in {what}; cosine similarity undefined")
    return a / norms[:, None]


def knn_accuracy(transported, targets, pairing=None, k=10):
    """Percentage of points whose true counterpart is among the ``k``
    cosine-nearest targets of the transported point."""
    T = _unit_rows(transported, "transported")
    Y = _unit_rows(targets, "targets")
    n = T.shape[0]
    pairing = np.arange(n) if pairing is None else np.asarray(pairing)
    if pairing.shape != (n,):
        raise ValueError("pairing must give one target index per transported point")
    if not 1 <= k <= Y.shape[0]:
        raise ValueError("k must be between 1 and the number of targets")
    hits = 0
    for start in range(0, n, 1024):
        sims = T[start : start + 1024] @ Y.T
        true_sim = sims[np.arange(sims.shape[0]), pairing[start : start + 1024]]
        # rank = number of targets strictly more similar than the true one
        rank = np.sum(sims > true_sim[:, None], axis=1)
        hits += int(np.sum(rank < k))
    return 100.0 * hits / n


def cycle_consistency_error(model: FlowModel, x):
    x = np.asarray(x, dtype=np.float64)
    back = model_inverse(model, model_forward(model, x).value).value
    return float(np.max(np.abs(back - x)))
