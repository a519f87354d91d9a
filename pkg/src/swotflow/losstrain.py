"""Training objective, Adam, and the staged slice schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import NonFiniteError, ParamStore, Tape, Tensor
from .flows import FlowModel, intermediate_outputs, unit_jacobian_frobenius_sq
from .otoracle import GaussianParams
from .swdist import sample_projections, sliced_wasserstein_power

logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lam: float = 0.05
    gamma: float = 0.01
    p: float = 2.0
    cost_exponent: float = 2.0
    regularize: bool = True
    semi_discrete: bool = False
    jacobian: str = "exact"
    hutchinson_probes: int = 1

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be >= 0")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.jacobian not in ("exact", "hutchinson"):
            raise ValueError("jacobian must be 'exact' or 'hutchinson'")

    def scaled(self, lam, gamma, regularize=True):
        d = asdict(self)
        d.update(lam=lam, gamma=gamma, regularize=regularize)
        return LossConfig(**d)


@dataclass
class Schedule:
    """Slice-count staircase with a delayed, growing regularization.

    ``J`` runs from ``j_start`` to ``j_end`` in steps of ``j_step``;
    ``epochs_per_step`` epochs run at each ``J``. Regularization switches on
    once ``J >= reg_start``, and ``lam``/``gamma`` are multiplied by
    ``growth_factor`` every ``growth_every`` slices after that. Once ``J``
    passes ``lr_decay_start`` the Adam learning rate is multiplied by
    ``lr_decay`` at every slice step (``lr_decay=1`` keeps it constant).
    """

    j_start: int = 500
    j_end: int = 2000
    j_step: int = 50
    epochs_per_step: int = 100
    reg_start: int = 1500
    growth_factor: float = 1.05
    growth_every: int = 100
    batch_size: int = 4096
    lr: float = 1e-4
    lr_decay: float = 1.0
    lr_decay_start: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.j_start > self.j_end or self.j_start < 1:
            raise ValueError("need 1 <= j_start <= j_end")
        if self.j_step < 1 or self.epochs_per_step < 1:
            raise ValueError("j_step and epochs_per_step must be >= 1")
        if self.growth_factor < 1:
            raise ValueError("growth_factor must be >= 1")
        if self.growth_every < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("growth_every, batch_size and lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    @classmethod
    def full_scale(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        base = dict(
            j_start=100, j_end=500, j_step=50, epochs_per_step=10, reg_start=300,
            batch_size=256, lr=3e-2, lr_decay=0.2, lr_decay_start=500,
        )
        base.update(overrides)
        return cls(**base)

    def lr_at(self, n_slices):
        if self.lr_decay == 1.0 or n_slices < self.lr_decay_start:
            return self.lr
        steps = (n_slices - self.lr_decay_start) // self.j_step + 1
        return self.lr * self.lr_decay**steps

    def slice_counts(self):
        return list(range(self.j_start, self.j_end + 1, self.j_step))

    def n_epochs(self):
        return len(self.slice_counts()) * self.epochs_per_step

    def weights_at(self, n_slices, cfg: LossConfig):
        """Effective ``(lam, gamma, active)`` at slice count ``n_slices``."""
        if not cfg.regularize or n_slices < self.reg_start:
            return 0.0, 0.0, False
        k = (n_slices - self.reg_start) // self.growth_every
        factor = self.growth_factor**k
        return cfg.lam * factor, cfg.gamma * factor, True


@dataclass
class LossReport:
    total: Tensor | float
    sw_term: float
    sw: float
    costs: np.ndarray
    energies: np.ndarray
    n_slices: int = 0
    lam: float = 0.0
    gamma: float = 0.0

    @property
    def total_value(self):
        return float(self.total.value if isinstance(self.total, Tensor) else self.total)

    def decomposition_error(self):
        expected = self.sw_term + self.lam * self.costs.sum() + self.gamma * self.energies.sum()
        return abs(self.total_value - expected) / max(abs(expected), 1e-300)


def _regularization(model: FlowModel, x, cfg: LossConfig, rng=None):
    outs = intermediate_outputs(model, x)
    q = cfg.cost_exponent
    costs, energies = [], []
    for m, unit in enumerate(model.units):
        sq = dc.sum(dc.square(dc.sub(outs[m + 1], outs[m])), axis=1)
        step = sq if q == 2 else dc.power(sq, q / 2.0)
        costs.append(dc.mean(step))
        frob = unit_jacobian_frobenius_sq(
            unit, outs[m], method=cfg.jacobian, probes=cfg.hutchinson_probes, rng=rng
        )
        energies.append(dc.mean(frob))
    return outs[-1], costs, energies


def _assemble(fidelity, costs, energies, cfg, n_slices, fidelity_root):
    total = fidelity
    lam, gamma = (cfg.lam, cfg.gamma) if cfg.regularize else (0.0, 0.0)
    if lam > 0:
        for c in costs:
            total = dc.add(total, dc.mul(lam, c))
    if gamma > 0:
        for e in energies:
            total = dc.add(total, dc.mul(gamma, e))
    if not np.isfinite(total.value):
        raise NonFiniteError("loss")
    return LossReport(
        total=total,
        sw_term=float(fidelity.value),
        sw=fidelity_root,
        costs=np.array([float(c.value) for c in costs]),
        energies=np.array([float(e.value) for e in energies]),
        n_slices=n_slices,
        lam=lam,
        gamma=gamma,
    )


def swot_loss(model: FlowModel, batch_x, batch_y, proj, cfg: LossConfig, rng=None) -> LossReport:
    """SW_p^p(T(x), y) + (1/N) sum_n sum_m [lam c(T_[m-1] x_n, T_[m] x_n) + gamma ||J_m||_F^2]."""
    bx, by = dc.as_tensor(batch_x), dc.as_tensor(batch_y)
    if bx.shape != by.shape:
        raise ValueError(f"batches must have equal shapes, got {bx.shape} and {by.shape}")
    out, costs, energies = _regularization(model, bx, cfg, rng)
    swp = sliced_wasserstein_power(out, by, proj)
    root = float(swp.value) ** (1.0 / proj.p)
    return _assemble(swp, costs, energies, cfg, proj.n_slices, root)


def gaussian_nll(z, target: GaussianParams):
    """Mean negative log-density of the rows of ``z`` under ``target``."""
    target.check_spd()
    d = target.dim
    prec = np.linalg.inv(target.cov)
    prec = 0.5 * (prec + prec.T)
    _, logdet = np.linalg.slogdet(target.cov)
    diff = dc.sub(z, target.mean)
    quad = dc.sum(dc.mul(dc.matmul(diff, prec), diff), axis=1)
    const = 0.5 * (d * math.log(2 * math.pi) + logdet)
    return dc.add(dc.mul(0.5, dc.mean(quad)), const)


def semi_discrete_loss(model: FlowModel, batch_x, target: GaussianParams, cfg: LossConfig, rng=None):
    """Negative log-likelihood of T(x) under a Gaussian target plus the same regularization."""
    bx = dc.as_tensor(batch_x)
    out, costs, energies = _regularization(model, bx, cfg, rng)
    nll = gaussian_nll(out, target)
    return _assemble(nll, costs, energies, cfg, 0, float(nll.value))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: ParamStore, lr=1e-4, **kw):
        state = cls(lr=lr, **kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        return state


def adam_step(state: AdamState, params: ParamStore, grads=None):
    """One bias-corrected Adam update, in place. Rejects non-finite gradients."""
    if grads is None:
        grads = params.grads()
    for name, g in grads.items():
        if g is None or not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step", f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    updates = {}
    # compute everything first so an overflow leaves state and params untouched
    with np.errstate(over="ignore", invalid="ignore"):
        for name, p in params.items():
            g = grads[name]
            m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
            new = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new))):
                raise NonFiniteError("adam_step", f"moment overflow for parameter {name!r}")
            updates[name] = (m, v, new)
    for name, (m, v, new) in updates.items():
        state.m[name], state.v[name] = m, v
        params[name].value = new
    state.step = t
    return state


class TrainingAborted(RuntimeError):
    """Non-finite loss; parameters were rolled back to the last good step."""

    def __init__(self, message, history, epoch):
        super().__init__(message)
        self.history = history
        self.epoch = epoch


def _mean_report(reports, n_slices, lam, gamma):
    return LossReport(
        total=float(np.mean([r.total_value for r in reports])),
        sw_term=float(np.mean([r.sw_term for r in reports])),
        sw=float(np.mean([r.sw for r in reports])),
        costs=np.mean([r.costs for r in reports], axis=0),
        energies=np.mean([r.energies for r in reports], axis=0),
        n_slices=n_slices,
        lam=lam,
        gamma=gamma,
    )


def train(model: FlowModel, data_x, data_y, schedule: Schedule, cfg: LossConfig, callback=None):
    """Fit ``model`` so that T(data_x) matches data_y under the staged schedule.

    ``data_y`` is a point array, or a :class:`GaussianParams` target when
    ``cfg.semi_discrete`` is set. Returns ``(model, history)`` with one
    epoch-averaged :class:`LossReport` per epoch. ``callback(epoch, report)``
    runs after every epoch.
    """
    x = np.asarray(data_x, dtype=np.float64)
    semi = cfg.semi_discrete
    if semi:
        if not isinstance(data_y, GaussianParams):
            raise TypeError("semi-discrete training needs a GaussianParams target")
        y = None
    else:
        y = np.asarray(data_y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != x.shape[1]:
            raise ValueError("source and target clouds must share the dimension")
        if len(y) < 1:
            raise ValueError("empty target cloud")
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("empty source cloud")

    if not model.initialized:
        model.initialize(x)

    batch_rng, proj_rng, probe_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(schedule.seed).spawn(3)
    )
    n_pool = len(x) if semi else min(len(x), len(y))
    bs = min(schedule.batch_size, n_pool)
    n_batches = n_pool // bs
    opt = AdamState.create(model.params, lr=schedule.lr)
    history = []
    epoch = 0
    for n_slices in schedule.slice_counts():
        opt.lr = schedule.lr_at(n_slices)
        lam, gamma, active = schedule.weights_at(n_slices, cfg)
        step_cfg = cfg.scaled(lam, gamma, regularize=active)
        for _ in range(schedule.epochs_per_step):
            proj = sample_projections(n_slices, x.shape[1], proj_rng, p=cfg.p)
            xi = batch_rng.permutation(len(x))
            yi = None if semi else batch_rng.permutation(len(y))
            reports = []
            for b in range(n_batches):
                bx = x[xi[b * bs : (b + 1) * bs]]
                good = model.params.state_dict()
                try:
                    with Tape() as tape:
                        if semi:
                            rep = semi_discrete_loss(model, bx, data_y, step_cfg, probe_rng)
                        else:
                            by = y[yi[b * bs : (b + 1) * bs]]
                            rep = swot_loss(model, bx, by, proj, step_cfg, probe_rng)
                    dc.backward(tape, rep.total, model.params)
                    adam_step(opt, model.params)
                except NonFiniteError as err:
                    model.params.load_state_dict(good)
                    raise TrainingAborted(f"epoch {epoch}: {err}", history, epoch) from err
                reports.append(rep)
            report = _mean_report(reports, n_slices, lam, gamma)
            history.append(report)
            if callback is not None:
                callback(epoch, report)
            logger.debug("epoch %d J=%d loss=%.6g sw=%.6g", epoch, n_slices, report.total, report.sw)
            epoch += 1
    return model, history


def gradcheck_instance(seed=0, n=8, dim=2, n_flows=2, n_slices=16, actnorm=False, perturb=0.3):
    """Small random problem for gradient checking.

    Returns ``(model, x, y, proj)``. With ``perturb > 0`` every parameter is
    moved off the identity initialization by Gaussian noise of that size.
    """
    from .flows import FlowSpec

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    y = 0.7 * rng.standard_normal((n, dim)) + 1.0
    model = FlowModel(FlowSpec(dim=dim, n_flows=n_flows, actnorm=actnorm), seed=seed)
    model.initialize(x)
    if perturb > 0:
        for p in model.params.values():
            p.value = p.value + perturb * rng.standard_normal(p.value.shape)
    proj = sample_projections(n_slices, dim, rng)
    return model, x, y, proj


def loss_gradient_check(model, x, y, proj, cfg: LossConfig, step=1e-5, fault=0.0):
    """Max relative error between the analytic loss gradient and central
    differences. ``fault`` is added to every analytic gradient entry."""

    def f():
        return swot_loss(model, x, y, proj, cfg).total

    with Tape() as tape:
        root = f()
    grads = dc.backward(tape, root, model.params)
    if fault:
        grads = {k: g + fault for k, g in grads.items()}
    return dc.finite_diff_check(f, model.params, step=step, analytic=grads)
