"""scikit-learn style wrapper around flow training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .flows import FlowModel, FlowSpec, MLPSpec, intermediate_outputs, model_forward, model_inverse
from .losstrain import LossConfig, Schedule, train
from .metrics import elementary_costs
from .swdist import sample_projections, sliced_wasserstein_value


def check_cloud(X, name="X", dim=None):
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True, input_name=name)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {dim}")
    return X


class SWOTFlow(TransformerMixin, BaseEstimator):
    """Learn a transport map from the cloud ``X`` to the cloud ``Y``.

    ``fit(X, Y)`` trains an invertible flow with the sliced-Wasserstein
    fidelity plus per-flow transport cost and Jacobian energy. After
    fitting, ``transform`` pushes points forward, ``inverse_transform``
    pulls them back and ``transform_intermediate`` returns the outputs of
    every flow.

    Parameters
    ----------
    n_flows : int
        Number of flow units.
    hidden : tuple of int
        Hidden widths of the offset and scale networks.
    actnorm : bool
        Put a data-initialized ActNorm layer in front of every coupling.
    lam, gamma : float
        Initial transport-cost and Jacobian-energy weights.
    p : float
        Order of the sliced-Wasserstein distance.
    regularize : bool
        Switch the regularization on once ``reg_start`` slices are reached.
    j_start, j_end, j_step, epochs_per_step, reg_start, growth_factor, growth_every
        Slice schedule, see :class:`swotflow.losstrain.Schedule`.
    batch_size : int
    lr : float
        Adam learning rate.
    lr_decay, lr_decay_start
        Learning-rate multiplier applied at each slice step from
        ``lr_decay_start`` slices on.
    jacobian : {"exact", "hutchinson"}
    random_state : int
    """

    def __init__(
        self,
        n_flows=4,
        hidden=(8, 8),
        actnorm=True,
        lam=0.05,
        gamma=0.01,
        p=2.0,
        regularize=True,
        j_start=100,
        j_end=500,
        j_step=50,
        epochs_per_step=10,
        reg_start=300,
        growth_factor=1.05,
        growth_every=100,
        batch_size=256,
        lr=3e-2,
        lr_decay=0.2,
        lr_decay_start=500,
        jacobian="exact",
        random_state=0,
    ):
        self.n_flows = n_flows
        self.hidden = hidden
        self.actnorm = actnorm
        self.lam = lam
        self.gamma = gamma
        self.p = p
        self.regularize = regularize
        self.j_start = j_start
        self.j_end = j_end
        self.j_step = j_step
        self.epochs_per_step = epochs_per_step
        self.reg_start = reg_start
        self.growth_factor = growth_factor
        self.growth_every = growth_every
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_start = lr_decay_start
        self.jacobian = jacobian
        self.random_state = random_state

    def _schedule(self):
        return Schedule(
            j_start=self.j_start,
            j_end=self.j_end,
            j_step=self.j_step,
            epochs_per_step=self.epochs_per_step,
            reg_start=self.reg_start,
            growth_factor=self.growth_factor,
            growth_every=self.growth_every,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay=self.lr_decay,
            lr_decay_start=self.lr_decay_start,
            seed=self.random_state,
        )

    def _loss_config(self):
        return LossConfig(
            lam=self.lam, gamma=self.gamma, p=self.p, regularize=self.regularize,
            jacobian=self.jacobian,
        )

    def fit(self, X, y):
        """Fit the map. ``y`` is the target point cloud (same dimension as ``X``)."""
        X = check_cloud(X, "X")
        Y = check_cloud(y, "y", dim=X.shape[1])
        spec = FlowSpec(
            dim=X.shape[1], n_flows=self.n_flows, mlp=MLPSpec(tuple(self.hidden)),
            actnorm=self.actnorm,
        )
        model = FlowModel(spec, seed=self.random_state)
        self.model_, self.history_ = train(model, X, Y, self._schedule(), self._loss_config())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_cloud(X, "X", dim=self.n_features_in_)
        return model_forward(self.model_, X).value

    def inverse_transform(self, X):
        check_is_fitted(self, "model_")
        X = check_cloud(X, "X", dim=self.n_features_in_)
        return model_inverse(self.model_, X).value

    def transform_intermediate(self, X):
        """``[X, T_[1](X), ..., T_[M](X)]``."""
        check_is_fitted(self, "model_")
        X = check_cloud(X, "X", dim=self.n_features_in_)
        return [o.value for o in intermediate_outputs(self.model_, X)]

    def transport_costs(self, X):
        check_is_fitted(self, "model_")
        return elementary_costs(self.model_, check_cloud(X, "X", dim=self.n_features_in_))

    def score(self, X, y, n_slices=2000):
        """Negative sliced-Wasserstein distance between T(X) and ``y``."""
        Y = check_cloud(y, "y", dim=self.n_features_in_)
        TX = self.transform(X)
        n = min(len(TX), len(Y))
        proj = sample_projections(n_slices, self.n_features_in_, np.random.default_rng(self.random_state), self.p)
        return -sliced_wasserstein_value(TX[:n], Y[:n], proj)
