import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gaussian_log_density, random_gaussian
from datadesign.errors import DimensionMismatch, InvalidDegreesOfFreedom, InvalidMatrix
from datadesign.measures import (
    EmpiricalMeasure,
    GaussianMeasure,
    MetaTestEnsemble,
    make_rng,
    project_cholesky,
    sample_gaussian,
    sample_wishart,
    score_cholesky,
    score_mean,
    second_moment,
)


def fd_score_mean(g, u, h=1e-5):
    out = np.zeros(g.dim)
    for i in range(g.dim):
        e = np.zeros(g.dim)
        e[i] = h
        out[i] = (gaussian_log_density(g.mean + e, g.cov_factor, u)
                  - gaussian_log_density(g.mean - e, g.cov_factor, u)) / (2 * h)
    return out


def fd_score_cholesky(g, u, h=1e-5):
    d = g.dim
    out = np.zeros((d, d))
    for i, j in zip(*np.tril_indices(d)):
        E = np.zeros((d, d))
        E[i, j] = h
        out[i, j] = (gaussian_log_density(g.mean, g.cov_factor + E, u)
                     - gaussian_log_density(g.mean, g.cov_factor - E, u)) / (2 * h)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestGaussianMeasure:
    def test_rejects_upper_entries(self):
        with pytest.raises(InvalidMatrix):
            GaussianMeasure(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_small_diagonal(self):
        with pytest.raises(InvalidMatrix):
            GaussianMeasure(np.zeros(2), np.diag([1.0, 0.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            GaussianMeasure(np.zeros(3), np.eye(2))

    def test_immutable(self):
        g = GaussianMeasure.standard(2)
        with pytest.raises(ValueError):
            g.mean[0] = 1.0

    def test_log_density_matches_dense(self, rng):
        g = random_gaussian(rng, 3)
        u = rng.standard_normal((4, 3))
        expected = [gaussian_log_density(g.mean, g.cov_factor, x) for x in u]
        npt.assert_allclose(g.log_density(u), expected, rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(d=st.integers(1, 5), seed=st.integers(0, 2**32 - 1),
           floor_diag=st.booleans())
    def test_covariance_symmetric_psd(self, d, seed, floor_diag):
        rng = np.random.default_rng(seed)
        L = np.tril(rng.standard_normal((d, d)))
        if floor_diag:
            L[np.diag_indices(d)] = -1.0
        g = GaussianMeasure(np.zeros(d), project_cholesky(L))
        C = g.cov
        npt.assert_array_equal(C, C.T)
        assert np.linalg.eigvalsh(C).min() >= -1e-12 * np.linalg.norm(C, 2)
        # the quadratic form is a squared norm through L, hence positive
        x = rng.standard_normal(d)
        assert np.sum((g.cov_factor.T @ x) ** 2) > 0

    @settings(max_examples=40, deadline=None)
    @given(diag=st.lists(st.floats(-2.0, 2.0), min_size=1, max_size=5))
    def test_diagonal_factor_eigen_floor(self, diag):
        g = GaussianMeasure(np.zeros(len(diag)), project_cholesky(np.diag(diag)))
        assert np.linalg.eigvalsh(g.cov).min() >= g.diag_floor**2 - 1e-14

    def test_eigen_floor_needs_diagonal_factor(self):
        # det C = prod L_ii^2 is tiny while the other eigenvalues are O(1), so the
        # smallest eigenvalue sits far below floor^2 for this valid factor.
        L = np.array([[1.0, 0.0], [1.0, 1e-7]])
        g = GaussianMeasure(np.zeros(2), L)
        lam = np.linalg.eigvalsh(g.cov)
        npt.assert_allclose(np.prod(lam), 1e-14, rtol=1e-3)
        assert lam.min() < g.diag_floor**2


class TestSampleGaussian:
    def test_mean_lln(self):
        pts = sample_gaussian(GaussianMeasure.standard(2), 100_000, make_rng(0)).points
        npt.assert_allclose(pts.mean(axis=0), 0.0, atol=0.02)

    def test_near_delta(self):
        g = GaussianMeasure(np.array([1.0, -2.0]), np.diag([1e-7, 1e-7]))
        pts = sample_gaussian(g, 3, make_rng(1)).points
        assert np.all(np.abs(pts - g.mean) < 1e-3)

    def test_deterministic(self):
        g = GaussianMeasure.standard(3)
        a = sample_gaussian(g, 5, make_rng(7)).points
        b = sample_gaussian(g, 5, make_rng(7)).points
        npt.assert_array_equal(a, b)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            sample_gaussian(GaussianMeasure.standard(1), 0, make_rng(0))

    @pytest.mark.parametrize("d", [1, 2, 3, 5])
    def test_covariance_operator_norm(self, d):
        rng = make_rng(d)
        g = random_gaussian(np.random.default_rng(d), d)
        pts = sample_gaussian(g, 100_000, rng).points
        C_hat = np.cov(pts, rowvar=False).reshape(d, d)
        assert np.linalg.norm(C_hat - g.cov, 2) <= 5e-2 * np.linalg.norm(g.cov, 2)


class TestSecondMoment:
    def test_standard(self):
        assert second_moment(GaussianMeasure.standard(3)) == 3.0

    def test_shifted(self):
        assert second_moment(GaussianMeasure(np.array([1.0, 2.0]), np.eye(2))) == 7.0

    def test_empirical(self):
        assert second_moment(EmpiricalMeasure(np.array([[0.0], [2.0]]))) == 2.0

    def test_gaussian_matches_monte_carlo(self, rng):
        g = random_gaussian(rng, 3)
        pts = g.sample(200_000, make_rng(3))
        npt.assert_allclose(second_moment(g), np.mean(np.sum(pts**2, axis=1)), rtol=2e-2)


class TestScores:
    def test_mean_at_mean(self):
        g = GaussianMeasure(np.array([1.0, 2.0]), np.eye(2))
        npt.assert_array_equal(score_mean(g, g.mean), np.zeros(2))

    def test_mean_identity_cov(self):
        g = GaussianMeasure(np.array([1.0, -1.0]), np.eye(2))
        npt.assert_allclose(score_mean(g, g.mean + np.array([1.0, 2.0])), [1.0, 2.0])

    def test_cholesky_at_mean(self):
        g = GaussianMeasure.standard(2)
        npt.assert_allclose(score_cholesky(g, g.mean), -np.eye(2))

    def test_cholesky_scalar(self):
        g = GaussianMeasure(np.zeros(1), np.array([[1.0]]))
        npt.assert_allclose(score_cholesky(g, np.array([1.0])), [[0.0]], atol=1e-15)
        g = GaussianMeasure(np.zeros(1), np.array([[2.0]]))
        npt.assert_allclose(score_cholesky(g, np.array([3.0])), [[9 / 8 - 1 / 2]])

    def test_cholesky_lower_triangular(self, rng):
        g = random_gaussian(rng, 4)
        S = score_cholesky(g, rng.standard_normal((6, 4)))
        assert S.shape == (6, 4, 4)
        npt.assert_array_equal(np.triu(S, 1), 0.0)

    def test_batch_matches_single(self, rng):
        g = random_gaussian(rng, 3)
        U = rng.standard_normal((5, 3))
        npt.assert_allclose(score_mean(g, U)[2], score_mean(g, U[2]))
        npt.assert_allclose(score_cholesky(g, U)[2], score_cholesky(g, U[2]))

    def test_mean_fd_d3(self, rng):
        g = random_gaussian(rng, 3)
        u = g.mean + rng.standard_normal(3)
        assert rel_err(score_mean(g, u), fd_score_mean(g, u)) < 1e-5

    def test_cholesky_fd_d3(self, rng):
        g = random_gaussian(rng, 3)
        u = g.mean + rng.standard_normal(3)
        assert rel_err(score_cholesky(g, u), fd_score_cholesky(g, u)) < 1e-5

    @pytest.mark.parametrize("d", [1, 2, 5])
    def test_fd_twenty_pairs(self, d):
        rng = np.random.default_rng(100 + d)
        for _ in range(20):
            g = random_gaussian(rng, d)
            u = g.mean + 1.5 * rng.standard_normal(d)
            assert rel_err(score_mean(g, u), fd_score_mean(g, u)) < 1e-4
            assert rel_err(score_cholesky(g, u), fd_score_cholesky(g, u)) < 1e-4

    def test_scores_have_zero_mean(self, rng):
        g = random_gaussian(rng, 2)
        U = g.sample(400_000, make_rng(5))
        npt.assert_allclose(score_mean(g, U).mean(axis=0), 0.0, atol=1e-2)
        npt.assert_allclose(score_cholesky(g, U).mean(axis=0), 0.0, atol=2e-2)


class TestWishart:
    def test_monte_carlo_mean(self):
        rng = make_rng(0)
        W = np.mean([sample_wishart(2, 3, rng) for _ in range(10_000)], axis=0)
        npt.assert_allclose(W, 3 * np.eye(2), atol=0.15)

    @settings(max_examples=30, deadline=None)
    @given(d=st.integers(1, 6), extra=st.integers(0, 4), seed=st.integers(0, 2**32 - 1))
    def test_symmetric_psd(self, d, extra, seed):
        W = sample_wishart(d, d + extra, make_rng(seed))
        assert np.max(np.abs(W - W.T)) <= 1e-12
        assert np.linalg.eigvalsh(W).min() >= -1e-12

    def test_deterministic(self):
        npt.assert_array_equal(sample_wishart(3, 4, make_rng(9)), sample_wishart(3, 4, make_rng(9)))

    def test_dof_too_small(self):
        with pytest.raises(InvalidDegreesOfFreedom):
            sample_wishart(3, 2, make_rng(0))


class TestEnsemble:
    def test_default_weights(self):
        Q = MetaTestEnsemble([GaussianMeasure.standard(2)] * 4)
        npt.assert_allclose(Q.weights, 0.25)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            MetaTestEnsemble([GaussianMeasure.standard(1)] * 2, weights=[0.5, 0.6])

    def test_mixed_dimensions(self):
        with pytest.raises(DimensionMismatch):
            MetaTestEnsemble([GaussianMeasure.standard(1), GaussianMeasure.standard(2)])

    def test_labels_and_subset(self):
        atoms = [EmpiricalMeasure(np.arange(6.0).reshape(3, 2)), EmpiricalMeasure(np.ones((3, 2)))]
        Q = MetaTestEnsemble(atoms).with_labels(lambda X: X.sum(axis=1))
        S = Q.subset([np.array([0, 2])] * 2)
        npt.assert_array_equal(S.labels[0], [1.0, 9.0])
        npt.assert_array_equal(S.atoms[1].points, np.ones((2, 2)))
