import numpy as np
import pytest

from swotflow.datasets import random_rotation
from swotflow.flows import FlowModel, FlowSpec, model_forward, model_inverse
from swotflow.metrics import (
    barycenter_mse,
    cycle_consistency_error,
    elementary_costs,
    knn_accuracy,
)
from swotflow.otoracle import GaussianParams


def translator(t):
    """One-flow model that adds ``t[1]`` to the second coordinate."""
    model = FlowModel(FlowSpec(dim=2, n_flows=1))
    W, b = model.units[0].coupling.offset_net.layers[-1]
    b.value = np.array([t[1]])
    return model


def random_model(dim, seed, scale=0.5, actnorm=True):
    rng = np.random.default_rng(seed)
    model = FlowModel(FlowSpec(dim=dim, n_flows=4, actnorm=actnorm), seed=seed)
    model.initialize(rng.standard_normal((100, dim)))
    for p in model.params.values():
        p.value = p.value + scale * rng.standard_normal(p.value.shape)
    return model


def test_identity_model_costs_zero():
    model = FlowModel(FlowSpec(dim=2, n_flows=3))
    c = elementary_costs(model, np.random.default_rng(0).standard_normal((20, 2)))
    np.testing.assert_array_equal(c.per_flow, [0.0, 0.0, 0.0])
    assert c.total == 0.0 and c.spread() == 0.0


def test_translation_cost_is_squared_norm():
    c = elementary_costs(translator((0.0, 3.0)), np.random.default_rng(1).standard_normal((50, 2)))
    assert c.per_flow[0] == pytest.approx(9.0)


def test_costs_invariant_to_point_order():
    model = random_model(3, 2)
    x = np.random.default_rng(3).standard_normal((40, 3))
    a, b = elementary_costs(model, x), elementary_costs(model, x[::-1])
    np.testing.assert_allclose(a.per_flow, b.per_flow, rtol=1e-12)


def test_cost_spread():
    from swotflow.metrics import CostBreakdown

    assert CostBreakdown(np.array([0.9, 1.1, 1.0, 1.0]), 4.0).spread() == pytest.approx(0.1)


def test_barycenter_mse_examples():
    rng = np.random.default_rng(4)
    ref = GaussianParams([1.0, 2.0], np.array([[1.0, 0.2], [0.2, 0.5]]))
    mse_a, mse_s = barycenter_mse(ref.sample(200_000, rng), ref)
    assert mse_a <= 1e-4 and mse_s <= 1e-3
    # exact sample moments give exact errors
    z = rng.standard_normal((1000, 2))
    z = (z - z.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(z.T, bias=True))).T
    pts = z @ np.linalg.cholesky(ref.cov).T + ref.mean + [0.3, -0.4]
    mse_a, mse_s = barycenter_mse(pts, ref)
    assert mse_a == pytest.approx(0.25, abs=1e-12)
    assert mse_s == pytest.approx(0.0, abs=1e-20)


def test_knn_perfect_and_random():
    rng = np.random.default_rng(5)
    y = rng.standard_normal((2000, 10))
    assert knn_accuracy(y, y, k=1) == 100.0
    acc = knn_accuracy(rng.standard_normal((2000, 10)), y, k=10)
    assert 0.15 <= acc <= 0.85


def test_knn_orthogonal_invariance():
    rng = np.random.default_rng(6)
    t, y = rng.standard_normal((300, 5)), rng.standard_normal((300, 5))
    t = y + 0.8 * t
    Q = random_rotation(5, rng)
    for k in (1, 5):
        assert knn_accuracy(t @ Q.T, y @ Q.T, k=k) == knn_accuracy(t, y, k=k)


def test_knn_uses_pairing_and_validates():
    y = np.eye(3)
    t = np.eye(3)[[2, 0, 1]]
    assert knn_accuracy(t, y, pairing=[2, 0, 1], k=1) == 100.0
    assert knn_accuracy(t, y, k=1) == 0.0
    with pytest.raises(ValueError):
        knn_accuracy(t, y, k=0)
    with pytest.raises(ValueError):
        knn_accuracy(np.zeros((3, 3)), y)
    with pytest.raises(ValueError):
        knn_accuracy(t, y, pairing=[0, 1])


def test_cycle_error_identity_and_random():
    assert cycle_consistency_error(FlowModel(FlowSpec(dim=2)), np.ones((5, 2))) == 0.0
    model = random_model(8, 7)
    x = np.random.default_rng(7).standard_normal((1000, 8))
    assert cycle_consistency_error(model, x) <= 1e-6


def test_cycle_error_detects_parameter_desync():
    model = random_model(4, 8, actnorm=False)
    x = np.random.default_rng(8).standard_normal((200, 4))
    y = model_forward(model, x).value
    p = next(iter(model.params.values()))
    errors = []
    for size in (1e-6, 1e-3, 1e-1):
        saved = p.value.copy()
        p.value = p.value + size
        errors.append(np.max(np.abs(model_inverse(model, y).value - x)))
        p.value = saved
    assert errors[0] < errors[1] < errors[2]
    assert errors[0] > 1e-9
