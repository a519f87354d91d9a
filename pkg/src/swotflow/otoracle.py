"""Reference OT computations used to validate learned transports.

Exact discrete OT between equal-size clouds (a linear assignment), the
Bures closed forms for Gaussians, and the two-measure Gaussian barycenter
fixed point.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

EIG_FLOOR = 1e-12


class DegenerateCovarianceWarning(UserWarning):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean of size {d}")

    @property
    def dim(self):
        return self.mean.size

    def check_spd(self):
        """Raise ``ValueError`` unless the covariance is symmetric positive definite."""
        if not np.allclose(self.cov, self.cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.cov).min() <= 0:
            raise ValueError("covariance is not positive definite")
        return self

    def sample(self, n, rng):
        return rng.multivariate_normal(self.mean, self.cov, size=n)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["cov"])


@dataclass
class Assignment:
    """Optimal matching ``x[n] -> y[perm[n]]`` and its mean cost."""

    perm: np.ndarray
    cost: float


def _cost_matrix(x, y, p):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape != y.shape:
        raise ValueError(f"exact OT needs equal-size clouds, got {x.shape} and {y.shape}")
    diff = x[:, None, :] - y[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return dist**p


def exact_ot_discrete(x, y, p=2.0):
    """Optimal permutation between uniform empirical measures, cost ``||.||^p``."""
    C = _cost_matrix(x, y, p)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(C.shape[0], dtype=np.intp)
    perm[rows] = cols
    return Assignment(perm, float(C[rows, cols].mean()))


def exhaustive_ot(x, y, p=2.0):
    """Brute force over all N! permutations; for N <= 8."""
    C = _cost_matrix(x, y, p)
    n = C.shape[0]
    if n > 8:
        raise ValueError("exhaustive OT is limited to N <= 8")
    best, best_perm = np.inf, None
    idx = np.arange(n)
    for perm in itertools.permutations(range(n)):
        cost = C[idx, perm].mean()
        if cost < best:
            best, best_perm = cost, perm
    return Assignment(np.array(best_perm, dtype=np.intp), float(best))


def _sym_eig(M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return w, V


def spd_sqrt(M):
    """Symmetric square root via eigendecomposition."""
    w, V = _sym_eig(M)
    if w.min() < -EIG_FLOOR:
        raise ValueError(f"matrix has a negative eigenvalue {w.min():.3e}")
    S = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return 0.5 * (S + S.T)


def spd_inv_sqrt(M):
    w, V = _sym_eig(M)
    if w.min() < EIG_FLOOR:
        raise ValueError(f"eigenvalue {w.min():.3e} below floor {EIG_FLOOR}; cannot invert")
    S = (V / np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def gaussian_w2(g1: GaussianParams, g2: GaussianParams):
    g1.check_spd()
    g2.check_spd()
    r2 = spd_sqrt(g2.cov)
    cross = spd_sqrt(r2 @ g1.cov @ r2)
    w2sq = np.sum((g1.mean - g2.mean) ** 2) + np.trace(g1.cov + g2.cov - 2.0 * cross)
    return float(np.sqrt(max(w2sq, 0.0)))


def _barycenter_update(S, cov1, cov2, alpha):
    root = spd_sqrt(S)
    inv_root = spd_inv_sqrt(S)
    inner = alpha * spd_sqrt(root @ cov1 @ root) + (1.0 - alpha) * spd_sqrt(root @ cov2 @ root)
    new = inv_root @ inner @ inner @ inv_root
    return 0.5 * (new + new.T)


def gaussian_barycenter_fixedpoint(g1, g2, alpha, tol=1e-10, max_iter=500, return_iters=False):
    """Barycenter minimizing ``alpha W2^2(g1, .) + (1 - alpha) W2^2(g2, .)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    g1.check_spd()
    g2.check_spd()
    if alpha == 1.0:
        out = GaussianParams(g1.mean.copy(), g1.cov.copy())
        return (out, 0) if return_iters else out
    if alpha == 0.0:
        out = GaussianParams(g2.mean.copy(), g2.cov.copy())
        return (out, 0) if return_iters else out

    mean = alpha * g1.mean + (1.0 - alpha) * g2.mean
    S = alpha * g1.cov + (1.0 - alpha) * g2.cov
    for it in range(1, max_iter + 1):
        new = _barycenter_update(S, g1.cov, g2.cov, alpha)
        step = np.linalg.norm(new - S)
        S = new
        if step <= tol:
            out = GaussianParams(mean, S)
            return (out, it) if return_iters else out
    raise ConvergenceError(f"barycenter fixed point did not converge in {max_iter} iterations")


def fixedpoint_residual(bary, g1, g2, alpha):
    """Frobenius size of one more fixed-point step from ``bary``."""
    return float(np.linalg.norm(_barycenter_update(bary.cov, g1.cov, g2.cov, alpha) - bary.cov))


def gaussian_ot_map(g1, g2):
    """Affine Monge map ``x -> A x + b`` pushing ``g1`` onto ``g2``."""
    g1.check_spd()
    g2.check_spd()
    r1 = spd_sqrt(g1.cov)
    inv_r1 = spd_inv_sqrt(g1.cov)
    A = inv_r1 @ spd_sqrt(r1 @ g2.cov @ r1) @ inv_r1
    A = 0.5 * (A + A.T)
    b = g2.mean - A @ g1.mean
    return A, b


def mle_gaussian_fit(samples):
    """Sample mean and 1/N covariance; warns when the covariance is singular."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least d + 1 = {d + 1} samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    scale = max(np.abs(cov).max(), 1.0)
    if np.linalg.eigvalsh(cov).min() <= EIG_FLOOR * scale:
        warnings.warn("MLE covariance is singular or nearly so", DegenerateCovarianceWarning)
    return GaussianParams(mean, cov)
