import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from swotflow import SWOTFlow

TINY = dict(j_start=10, j_end=20, j_step=10, epochs_per_step=3, reg_start=20, batch_size=64, lr=2e-2)


@pytest.fixture(scope="module")
def clouds():
    rng = np.random.default_rng(0)
    return rng.standard_normal((128, 2)), rng.standard_normal((128, 2)) + [3.0, 0.0]


@pytest.fixture(scope="module")
def fitted(clouds):
    x, y = clouds
    return SWOTFlow(**TINY).fit(x, y)


def test_params_and_clone():
    est = SWOTFlow(n_flows=2, lam=0.2)
    params = est.get_params()
    assert params["n_flows"] == 2 and params["lam"] == 0.2 and params["random_state"] == 0
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(gamma=0.5)
    assert est.gamma == 0.5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SWOTFlow().transform(np.zeros((2, 2)))


def test_fit_transform_inverse(fitted, clouds):
    x, y = clouds
    tx = fitted.transform(x)
    np.testing.assert_allclose(fitted.inverse_transform(tx), x, atol=1e-9)
    inter = fitted.transform_intermediate(x)
    assert len(inter) == 5 and np.array_equal(inter[-1], tx)
    assert len(fitted.history_) == 6 and fitted.n_features_in_ == 2
    assert fitted.transport_costs(x).per_flow.shape == (4,)


def test_training_moves_towards_target(fitted, clouds):
    x, y = clouds
    before = SWOTFlow(**TINY).fit(x, x).score(x, y)
    assert fitted.score(x, y) > before


def test_fit_is_deterministic(fitted, clouds):
    x, y = clouds
    again = SWOTFlow(**TINY).fit(x, y)
    assert np.array_equal(again.transform(x), fitted.transform(x))


def test_input_validation(fitted):
    with pytest.raises(ValueError):
        SWOTFlow(**TINY).fit(np.zeros((10, 2)), np.zeros((10, 3)))
    with pytest.raises(ValueError):
        fitted.transform(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        fitted.transform(np.array([[np.nan, 0.0]]))
