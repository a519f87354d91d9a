"""Invertible flow units: affine couplings with optional ActNorm.

Every unit maps R^d to R^d as ``coupling(actnorm(x))``. A coupling layer
leaves the "id" coordinates alone and updates the "ch" coordinates as

    y_ch = (x_ch + D(x_id)) * exp(E(x_id))

with ``D`` (offset) and ``E`` (scale) small tanh MLPs. Masks alternate from
one unit to the next so that every coordinate gets transformed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import NonFiniteError, ParamStore, Tensor

SCALE_CLAMP = 5.0


@dataclass(frozen=True)
class MLPSpec:
    hidden: tuple = (8, 8)

    def __post_init__(self):
        if len(self.hidden) < 1 or any(int(h) < 1 for h in self.hidden):
            raise ValueError("MLPSpec needs at least one hidden layer of positive width")


@dataclass(frozen=True)
class FlowSpec:
    """Architecture of a :class:`FlowModel`."""

    dim: int
    n_flows: int = 4
    mlp: MLPSpec = field(default_factory=MLPSpec)
    actnorm: bool = False
    clamp: float = SCALE_CLAMP

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("coupling flows need dim >= 2")
        if self.n_flows < 1:
            raise ValueError("n_flows must be >= 1")

    def to_dict(self):
        return {
            "dim": self.dim,
            "n_flows": self.n_flows,
            "hidden": list(self.mlp.hidden),
            "actnorm": self.actnorm,
            "clamp": self.clamp,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        hidden = tuple(d.pop("hidden", (8, 8)))
        return cls(mlp=MLPSpec(hidden), **d)


def alternating_mask(dim, index):
    """Boolean "ch" mask for unit ``index`` (0-based).

    Unit ``index`` is the (index+1)-th flow. Odd-numbered flows keep the
    first ceil(dim/2) coordinates fixed; even-numbered flows use the
    complement.
    """
    head = math.ceil(dim / 2)
    mask = np.zeros(dim, dtype=bool)
    if index % 2 == 0:
        mask[head:] = True
    else:
        mask[:head] = True
    return mask


class MLP:
    """tanh MLP whose last layer starts at zero (so its output starts at 0)."""

    def __init__(self, params: ParamStore, prefix, widths, rng):
        self.widths = list(widths)
        self.layers = []
        n = len(widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if i == n - 1:
                W = np.zeros((fan_out, fan_in))
            else:
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            self.layers.append((params.add(f"{prefix}.W{i}", W), params.add(f"{prefix}.b{i}", b)))

    def __call__(self, x):
        h = x
        for W, b in self.layers[:-1]:
            h = dc.tanh(dc.affine(h, W, b))
        W, b = self.layers[-1]
        return dc.affine(h, W, b)

    def with_jacobian(self, x):
        """Output and per-point input Jacobian, shape (n, out, in)."""
        h = x
        jac = None
        for W, b in self.layers[:-1]:
            h = dc.tanh(dc.affine(h, W, b))
            slope = dc.reshape(dc.sub(1.0, dc.square(h)), h.shape + (1,))
            jac = dc.mul(slope, W) if jac is None else dc.mul(slope, dc.matmul(W, jac))
        W, b = self.layers[-1]
        return dc.affine(h, W, b), dc.matmul(W, jac)


class CouplingLayer:
    def __init__(self, params, prefix, mask, mlp: MLPSpec, rng, clamp=SCALE_CLAMP):
        mask = np.asarray(mask, dtype=bool)
        if mask.all() or not mask.any():
            raise ValueError("coupling mask needs both changed and unchanged coordinates")
        self.mask = mask
        self.dim = mask.size
        self.id_idx = np.flatnonzero(~mask)
        self.ch_idx = np.flatnonzero(mask)
        self.order = np.argsort(np.concatenate([self.id_idx, self.ch_idx]))
        self.clamp = clamp
        self.prefix = prefix
        widths = [self.id_idx.size, *mlp.hidden, self.ch_idx.size]
        self.offset_net = MLP(params, f"{prefix}.offset", widths, rng)
        self.scale_net = MLP(params, f"{prefix}.scale", widths, rng)

    def _split(self, x):
        return dc.take(x, self.id_idx, axis=1), dc.take(x, self.ch_idx, axis=1)

    def _merge(self, a_id, a_ch):
        return dc.take(dc.concat([a_id, a_ch], axis=1), self.order, axis=1)

    def _scale(self, raw):
        s = self.clamp
        return dc.mul(s, dc.tanh(dc.mul(raw, 1.0 / s)))

    def _exp_scale(self, e):
        try:
            return dc.exp(e)
        except NonFiniteError as err:
            raise NonFiniteError("exp", f"scale overflow in {self.prefix}") from err

    def forward(self, x):
        x_id, x_ch = self._split(x)
        shift = self.offset_net(x_id)
        scale = self._exp_scale(self._scale(self.scale_net(x_id)))
        return self._merge(x_id, dc.mul(dc.add(x_ch, shift), scale))

    def inverse(self, y):
        y_id, y_ch = self._split(y)
        shift = self.offset_net(y_id)
        inv_scale = self._exp_scale(dc.neg(self._scale(self.scale_net(y_id))))
        return self._merge(y_id, dc.sub(dc.mul(y_ch, inv_scale), shift))

    def frobenius_sq(self, x, col_scale=None):
        """Per-point squared Frobenius norm of the Jacobian at ``x``.

        ``col_scale`` multiplies the Jacobian on the right by a diagonal
        (the ActNorm scale feeding this layer).
        """
        x_id, x_ch = self._split(x)
        shift, jac_shift = self.offset_net.with_jacobian(x_id)
        raw, jac_raw = self.scale_net.with_jacobian(x_id)
        s = self.clamp
        t = dc.tanh(dc.mul(raw, 1.0 / s))
        scale = self._exp_scale(dc.mul(s, t))
        n = x.shape[0]
        col = (n, self.ch_idx.size, 1)
        jac_scale = dc.mul(dc.reshape(dc.sub(1.0, dc.square(t)), col), jac_raw)
        coupled = dc.add(
            dc.mul(dc.reshape(scale, col), jac_shift),
            dc.mul(dc.reshape(dc.mul(dc.add(x_ch, shift), scale), col), jac_scale),
        )
        # columns of J: id columns are e_i stacked on a column of `coupled`,
        # ch columns are exp(E_j) e_j
        id_cols = dc.add(1.0, dc.sum(dc.square(coupled), axis=1))
        ch_cols = dc.square(scale)
        if col_scale is not None:
            sq = dc.square(col_scale)
            id_cols = dc.mul(id_cols, dc.take(sq, self.id_idx, axis=0))
            ch_cols = dc.mul(ch_cols, dc.take(sq, self.ch_idx, axis=0))
        return dc.add(dc.sum(id_cols, axis=1), dc.sum(ch_cols, axis=1))


class ActNormLayer:
    """Per-dimension affine map ``x * exp(log_scale) + offset``."""

    def __init__(self, params, prefix, dim):
        self.log_scale = params.add(f"{prefix}.log_scale", np.zeros(dim))
        self.offset = params.add(f"{prefix}.offset", np.zeros(dim))
        self.initialized = False

    def scale(self):
        return dc.exp(self.log_scale)

    def forward(self, x):
        return dc.add(dc.mul(x, self.scale()), self.offset)

    def inverse(self, y):
        return dc.mul(dc.sub(y, self.offset), dc.exp(dc.neg(self.log_scale)))


def actnorm_init(layer: ActNormLayer, batch):
    """Data-dependent init: ``batch`` comes out with zero mean and unit variance."""
    if layer.initialized:
        raise RuntimeError("ActNorm layer already initialized")
    x = np.asarray(batch.value if isinstance(batch, Tensor) else batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("ActNorm init needs a batch of at least 2 points")
    mu = x.mean(axis=0)
    std = x.std(axis=0)
    if np.any(std <= 0):
        raise ValueError("ActNorm init batch has a zero-variance dimension")
    layer.log_scale.value = -np.log(std)
    layer.offset.value = -mu / std
    layer.initialized = True


class FlowUnit:
    def __init__(self, params, prefix, dim, index, spec: FlowSpec, rng):
        self.actnorm = ActNormLayer(params, f"{prefix}.actnorm", dim) if spec.actnorm else None
        self.coupling = CouplingLayer(
            params, f"{prefix}.coupling", alternating_mask(dim, index), spec.mlp, rng, spec.clamp
        )

    def forward(self, x):
        if self.actnorm is not None:
            x = self.actnorm.forward(x)
        return self.coupling.forward(x)

    def inverse(self, y):
        x = self.coupling.inverse(y)
        if self.actnorm is not None:
            x = self.actnorm.inverse(x)
        return x


class FlowModel:
    """Composition ``T = T_M o ... o T_1`` of :class:`FlowUnit` objects."""

    def __init__(self, spec: FlowSpec, seed=0):
        self.spec = spec
        self.dim = spec.dim
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        self.units = [
            FlowUnit(self.params, f"unit{m}", spec.dim, m, spec, rng) for m in range(spec.n_flows)
        ]

    @property
    def n_flows(self):
        return len(self.units)

    @property
    def initialized(self):
        return all(u.actnorm is None or u.actnorm.initialized for u in self.units)

    def initialize(self, x):
        """Run data-dependent ActNorm init unit by unit on ``x``."""
        h = dc.as_tensor(_as_batch(x, self.dim))
        for unit in self.units:
            if unit.actnorm is not None and not unit.actnorm.initialized:
                actnorm_init(unit.actnorm, h)
            h = unit.forward(h)
        return self

    def _check(self, x):
        if not self.initialized:
            raise RuntimeError("model has uninitialized ActNorm layers; call initialize()")
        if isinstance(x, Tensor):
            if x.ndim != 2 or x.shape[1] != self.dim:
                raise ValueError(f"expected batch of shape (n, {self.dim}), got {x.shape}")
            return x
        return Tensor(_as_batch(x, self.dim))


def _as_batch(x, dim):
    x = np.asarray(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected points of shape (n, {dim}), got {x.shape}")
    return x


def coupling_forward(layer: CouplingLayer, x):
    return layer.forward(dc.as_tensor(x))


def coupling_inverse(layer: CouplingLayer, y):
    return layer.inverse(dc.as_tensor(y))


def model_forward(model: FlowModel, x):
    h = model._check(x)
    for unit in model.units:
        h = unit.forward(h)
    return h


def model_inverse(model: FlowModel, y):
    h = model._check(y)
    for unit in reversed(model.units):
        h = unit.inverse(h)
    return h


def intermediate_outputs(model: FlowModel, x):
    """``[x, T_[1](x), ..., T_[M](x)]`` as tensors."""
    h = model._check(x)
    outs = [h]
    for unit in model.units:
        h = unit.forward(h)
        outs.append(h)
    return outs


def _exact_frobenius_sq(unit: FlowUnit, x):
    col_scale = None
    if unit.actnorm is not None:
        col_scale = unit.actnorm.scale()
        x = unit.actnorm.forward(x)
    return unit.coupling.frobenius_sq(x, col_scale)


def _hutchinson_frobenius_sq(unit: FlowUnit, x, probes, rng):
    total = None
    for _ in range(probes):
        v = rng.choice([-1.0, 1.0], size=x.shape)
        jv = dc.jvp(unit.forward, x, Tensor(v))
        sq = dc.sum(dc.square(jv), axis=1)
        total = sq if total is None else dc.add(total, sq)
    return dc.mul(total, 1.0 / probes)


def unit_jacobian_frobenius_sq(unit: FlowUnit, x, method="exact", probes=1, rng=None):
    """Per-point ``||J_unit(x)||_F^2``, differentiable in the unit parameters.

    ``x`` must be the unit's actual input. ``method="hutchinson"`` gives an
    unbiased Rademacher estimate through forward-mode products instead.
    """
    x = dc.as_tensor(x)
    if method == "exact":
        return _exact_frobenius_sq(unit, x)
    if method == "hutchinson":
        if rng is None:
            rng = np.random.default_rng()
        return _hutchinson_frobenius_sq(unit, x, probes, rng)
    raise ValueError(f"unknown Jacobian method {method!r}")
