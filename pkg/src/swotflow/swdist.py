"""Sliced-Wasserstein distance between equal-size point clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class ProjectionSet:
    """``J`` unit directions (rows of ``directions``) and the order ``p``."""

    directions: np.ndarray
    p: float = 2.0

    def __post_init__(self):
        u = np.asarray(self.directions, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] < 1:
            raise ValueError("directions must be a non-empty (J, d) array")
        if not self.p >= 1:
            raise ValueError("order p must be >= 1")
        object.__setattr__(self, "directions", u)

    @property
    def n_slices(self):
        return self.directions.shape[0]

    @property
    def dim(self):
        return self.directions.shape[1]


def sample_projections(n_slices, dim, rng, p=2.0):
    """Directions drawn uniformly on the unit sphere (normalized Gaussians)."""
    if n_slices < 1 or dim < 1:
        raise ValueError("need n_slices >= 1 and dim >= 1")
    g = rng.standard_normal((n_slices, dim))
    norms = np.linalg.norm(g, axis=1)
    while np.any(norms == 0):
        bad = norms == 0
        g[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(g, axis=1)
    return ProjectionSet(g / norms[:, None], p)


def _sorted_cols(a):
    if not a.requires_grad and a.tangent is None:
        return Tensor(np.sort(a.value, axis=0, kind="stable"))
    # stable sort keeps the tie-break deterministic (by original index)
    order = np.argsort(a.value, axis=0, kind="stable")
    return dc.permute(a, order, axis=0)


def _power_mean(a, b, p):
    diff = dc.sub(_sorted_cols(a), _sorted_cols(b))
    if p == 2:
        return dc.mean(dc.square(diff))
    return dc.mean(dc.power(dc.absolute(diff), p))


def _as_column_batch(a):
    a = dc.as_tensor(a)
    if a.ndim == 1:
        a = dc.reshape(a, (a.shape[0], 1))
    return a


def wasserstein_1d(a, b, p=2.0):
    """W_p between two equal-size 1-d empirical measures (sorted matching)."""
    a, b = _as_column_batch(a), _as_column_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"wasserstein_1d needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    wp = _power_mean(a, b, p)
    return dc.power(wp, 1.0 / p) if wp.value > 0 else wp


def _check_clouds(x, y, proj):
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("point clouds must be 2-d arrays")
    if x.shape != y.shape:
        raise ValueError(f"sliced Wasserstein needs equal-size clouds, got {x.shape} and {y.shape}")
    if x.shape[1] != proj.dim:
        raise ValueError(f"cloud dimension {x.shape[1]} != projection dimension {proj.dim}")
    return x, y


def sliced_wasserstein_power(x, y, proj: ProjectionSet):
    """Monte Carlo estimate of ``SW_p^p``; smooth at zero, used in losses."""
    x, y = _check_clouds(x, y, proj)
    ut = proj.directions.T
    return _power_mean(dc.matmul(x, ut), dc.matmul(y, ut), proj.p)


def sliced_wasserstein(x, y, proj: ProjectionSet):
    """``SW_p`` itself, i.e. the p-th root of :func:`sliced_wasserstein_power`."""
    swp = sliced_wasserstein_power(x, y, proj)
    if swp.value == 0:
        return swp
    return dc.power(swp, 1.0 / proj.p)


def sliced_wasserstein_value(x, y, proj: ProjectionSet) -> float:
    """Numpy-only convenience: the SW value as a float, no tape."""
    xv = np.asarray(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
    yv = np.asarray(y.value if isinstance(y, Tensor) else y, dtype=np.float64)
    if xv.shape != yv.shape or xv.shape[1] != proj.dim:
        raise ValueError("clouds must have equal shapes matching the projections")
    ut = proj.directions.T
    diff = np.sort(xv @ ut, axis=0) - np.sort(yv @ ut, axis=0)
    return float(np.mean(np.abs(diff) ** proj.p) ** (1.0 / proj.p))
