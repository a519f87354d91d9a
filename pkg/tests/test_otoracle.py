import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import wasserstein_distance

from swotflow.otoracle import (
    ConvergenceError,
    DegenerateCovarianceWarning,
    GaussianParams,
    exact_ot_discrete,
    exhaustive_ot,
    fixedpoint_residual,
    gaussian_barycenter_fixedpoint,
    gaussian_ot_map,
    gaussian_w2,
    mle_gaussian_fit,
    spd_inv_sqrt,
    spd_sqrt,
)
from swotflow.swdist import wasserstein_1d


def random_spd(d, rng, floor=0.2):
    A = rng.standard_normal((d, d))
    return A @ A.T + floor * np.eye(d)


def random_gaussian(d, rng):
    return GaussianParams(rng.standard_normal(d) * 2, random_spd(d, rng))


# --------------------------------------------------------------------------- discrete OT


def test_exact_ot_examples():
    x = np.array([[0.0, 0.0], [1.0, 0.0]])
    a = exact_ot_discrete(x, x)
    assert a.cost == 0.0
    np.testing.assert_array_equal(a.perm, [0, 1])
    a = exact_ot_discrete(x, x[::-1])
    np.testing.assert_array_equal(a.perm, [1, 0])
    a = exact_ot_discrete(np.zeros((2, 2)), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert a.cost == pytest.approx(1.0)


def test_exact_ot_rejects_unequal_sizes():
    with pytest.raises(ValueError):
        exact_ot_discrete(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        exhaustive_ot(np.zeros((9, 1)), np.zeros((9, 1)))


def test_exact_ot_beats_heuristics():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.standard_normal((30, 2)), rng.standard_normal((30, 2))
        best = exact_ot_discrete(x, y).cost
        ident = np.mean(np.sum((x - y) ** 2, axis=1))
        sorted_pair = np.mean(np.sum((x[np.argsort(x[:, 0])] - y[np.argsort(y[:, 0])]) ** 2, axis=1))
        assert best <= ident + 1e-12 and best <= sorted_pair + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 3), st.sampled_from([1.0, 2.0]), st.integers(0, 10**6))
def test_assignment_matches_exhaustive(n, d, p, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    assert abs(exact_ot_discrete(x, y, p).cost - exhaustive_ot(x, y, p).cost) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10**6))
def test_one_dimensional_ot_matches_sorted_matching(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(n), rng.standard_normal(n)
    assert abs(exact_ot_discrete(a, b).cost ** 0.5 - wasserstein_1d(a, b).item()) <= 1e-10
    # W1 cross-check against scipy
    assert abs(exact_ot_discrete(a, b, p=1.0).cost - wasserstein_distance(a, b)) <= 1e-10


# --------------------------------------------------------------------------- matrix roots


def test_spd_sqrt_examples():
    np.testing.assert_array_equal(spd_sqrt(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(spd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-15)
    rng = np.random.default_rng(1)
    for d in (2, 4, 8):
        M = random_spd(d, rng)
        S = spd_sqrt(M)
        assert np.linalg.norm(S @ S - M) <= 1e-10
        np.testing.assert_allclose(spd_inv_sqrt(M) @ S, np.eye(d), atol=1e-10)


def test_spd_sqrt_errors():
    with pytest.raises(ValueError, match="symmetric"):
        spd_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="negative"):
        spd_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError, match="floor"):
        spd_inv_sqrt(np.diag([1.0, 0.0]))


def test_gaussian_params_validation():
    with pytest.raises(ValueError):
        GaussianParams([0.0, 0.0], np.diag([1.0, -1.0])).check_spd()
    g = GaussianParams([1.0, 2.0], np.diag([1.0, 3.0]))
    h = GaussianParams.from_dict(g.to_dict())
    assert np.array_equal(g.mean, h.mean) and np.array_equal(g.cov, h.cov)


# --------------------------------------------------------------------------- W2 and maps


def test_gaussian_w2_closed_forms():
    I = np.eye(3)
    assert gaussian_w2(GaussianParams(np.zeros(3), I), GaussianParams([1.0, 2.0, 2.0], I)) == pytest.approx(3.0)
    g1 = GaussianParams(np.zeros(4), 0.25 * np.eye(4))
    g2 = GaussianParams(np.zeros(4), 2.25 * np.eye(4))
    assert gaussian_w2(g1, g2) == pytest.approx(2.0 * abs(0.5 - 1.5))


def test_gaussian_w2_symmetry_and_triangle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a, b, c = (random_gaussian(3, rng) for _ in range(3))
        assert gaussian_w2(a, b) == pytest.approx(gaussian_w2(b, a), abs=1e-8)
        assert gaussian_w2(a, c) <= gaussian_w2(a, b) + gaussian_w2(b, c) + 1e-8


def test_ot_map_examples():
    g = GaussianParams([1.0, -1.0], np.array([[2.0, 0.3], [0.3, 1.0]]))
    A, b = gaussian_ot_map(g, g)
    np.testing.assert_allclose(A, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(b, 0.0, atol=1e-12)
    A, b = gaussian_ot_map(GaussianParams(np.zeros(2), np.eye(2)), GaussianParams([3.0, 0.0], np.eye(2)))
    np.testing.assert_allclose(A, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(b, [3.0, 0.0], atol=1e-12)


def test_ot_map_pushes_forward_exactly():
    rng = np.random.default_rng(3)
    for d in (2, 3, 6):
        g1, g2 = random_gaussian(d, rng), random_gaussian(d, rng)
        A, b = gaussian_ot_map(g1, g2)
        assert np.linalg.norm(A @ g1.mean + b - g2.mean) <= 1e-9
        assert np.linalg.norm(A @ g1.cov @ A.T - g2.cov) <= 1e-9
        assert np.all(np.linalg.eigvalsh(A) > 0)


# --------------------------------------------------------------------------- barycenter


def test_barycenter_endpoints():
    rng = np.random.default_rng(4)
    g1, g2 = random_gaussian(2, rng), random_gaussian(2, rng)
    b = gaussian_barycenter_fixedpoint(g1, g2, 1.0)
    assert np.array_equal(b.mean, g1.mean) and np.array_equal(b.cov, g1.cov)
    with pytest.raises(ValueError):
        gaussian_barycenter_fixedpoint(g1, g2, 1.5)


def test_barycenter_commuting_closed_form():
    g1 = GaussianParams([0.0, 0.0], np.diag([1.0, 4.0]))
    g2 = GaussianParams([2.0, 2.0], np.diag([4.0, 1.0]))
    b = gaussian_barycenter_fixedpoint(g1, g2, 0.5)
    assert np.linalg.norm(b.cov - np.diag([2.25, 2.25])) <= 1e-8
    np.testing.assert_allclose(b.mean, [1.0, 1.0])


def test_barycenter_is_fixed_point_and_stationary():
    rng = np.random.default_rng(5)
    tol = 1e-10
    for alpha in (0.25, 0.5, 0.8):
        g1, g2 = random_gaussian(3, rng), random_gaussian(3, rng)
        b = gaussian_barycenter_fixedpoint(g1, g2, alpha, tol=tol)
        assert fixedpoint_residual(b, g1, g2, alpha) <= 10 * tol

        def objective(cov):
            g = GaussianParams(b.mean, cov)
            return alpha * gaussian_w2(g1, g) ** 2 + (1 - alpha) * gaussian_w2(g2, g) ** 2

        base = objective(b.cov)
        for _ in range(20):
            E = rng.standard_normal((3, 3)) * 1e-3
            assert objective(b.cov + E + E.T) - base >= -1e-6


def test_barycenter_lies_on_geodesic():
    # the barycenter is the McCann interpolant of the OT map
    rng = np.random.default_rng(6)
    g1, g2 = random_gaussian(2, rng), random_gaussian(2, rng)
    A, _ = gaussian_ot_map(g1, g2)
    t = 0.3
    M = (1 - t) * np.eye(2) + t * A
    b = gaussian_barycenter_fixedpoint(g1, g2, 1 - t)
    assert np.linalg.norm(M @ g1.cov @ M.T - b.cov) <= 1e-8


def test_barycenter_convergence_error():
    rng = np.random.default_rng(7)
    g1, g2 = random_gaussian(3, rng), random_gaussian(3, rng)
    with pytest.raises(ConvergenceError):
        gaussian_barycenter_fixedpoint(g1, g2, 0.5, tol=0.0, max_iter=3)


# --------------------------------------------------------------------------- MLE


def test_mle_examples():
    g = mle_gaussian_fit(np.array([[-1.0], [1.0]]))
    assert g.mean[0] == 0.0 and g.cov[0, 0] == 1.0
    with pytest.warns(DegenerateCovarianceWarning):
        g = mle_gaussian_fit(np.ones((10, 2)) * 3.0)
    np.testing.assert_array_equal(g.mean, [3.0, 3.0])
    np.testing.assert_allclose(g.cov, 0.0, atol=1e-14)
    with pytest.raises(ValueError):
        mle_gaussian_fit(np.ones((2, 2)))


def test_mle_recovers_parameters():
    rng = np.random.default_rng(8)
    g = GaussianParams([1.0, -2.0, 0.5], np.array([[1.0, 0.3, 0.0], [0.3, 0.5, 0.1], [0.0, 0.1, 2.0]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit = mle_gaussian_fit(g.sample(100_000, rng))
    assert np.sum((fit.mean - g.mean) ** 2) <= 1e-3
    assert np.sum((fit.cov - g.cov) ** 2) <= 1e-2
