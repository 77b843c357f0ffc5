import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sadcbo.gp import (
    ContractError,
    FitConfig,
    GaussianMoments,
    InputPoint,
    KernelSpec,
    condition,
    fit_hyperparameters,
    jittered_cholesky,
    joint_sample,
    kernel_eval,
    kernel_matrix,
    kl_multivariate,
    kl_univariate,
    log_marginal_likelihood,
    posterior,
    posterior_mean_var,
    predictive_distribution,
)

NOISE = 1e-3


def rbf_dense(A, B, ls, sf2):
    """Independent transcription of the ARD squared-exponential kernel."""
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            out[i, j] = sf2 * math.exp(-0.5 * sum(((A[i, k] - B[j, k]) / ls[k]) ** 2 for k in range(A.shape[1])))
    return out


def joint_conditioning(X, y, Xq, ls, sf2, noise):
    """Gaussian conditioning on the joint prior of (y, f(Xq)) via dense inverses."""
    n = X.shape[0]
    joint = rbf_dense(np.vstack([X, Xq]), np.vstack([X, Xq]), ls, sf2)
    Kyy = joint[:n, :n] + noise * np.eye(n)
    Kqy = joint[n:, :n]
    Kqq = joint[n:, n:]
    inv = np.linalg.inv(Kyy)
    return Kqy @ inv @ y, Kqq - Kqy @ inv @ Kqy.T


class TestKernel:
    def test_identity_point_is_signal_variance(self):
        spec = KernelSpec(np.ones(3))
        a = InputPoint([0.2, 0.4], [0.9])
        assert kernel_eval(spec, a, a) == 1.0

    def test_unit_distance_one_dim(self):
        spec = KernelSpec(np.ones(1))
        np.testing.assert_allclose(kernel_matrix(spec, [[0.0]], [[1.0]])[0, 0], math.exp(-0.5), rtol=1e-14)

    def test_additive_at_zero_distance(self):
        spec = KernelSpec(np.ones(3), signal_variance=0.7, composition="additive", n_design=2)
        v = np.array([[0.1, 0.5, 0.3]])
        np.testing.assert_allclose(kernel_matrix(spec, v, v)[0, 0], 1.4)

    def test_mismatched_masks_rejected(self):
        spec = KernelSpec(np.ones(2))
        a = InputPoint([0.1], [0.2, 0.3], active_mask=[True, True, False])
        b = InputPoint([0.1], [0.2, 0.3], active_mask=[True, False, True])
        with pytest.raises(ContractError):
            kernel_eval(spec, a, b)

    def test_inactive_design_rejected(self):
        with pytest.raises(ContractError):
            InputPoint([0.1, 0.2], [0.3], active_mask=[False, True, True])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            kernel_matrix(KernelSpec(np.ones(2)), np.zeros((1, 3)), np.zeros((1, 3)))

    def test_matches_dense_transcription(self):
        rng = np.random.default_rng(0)
        A, B = rng.random((4, 3)), rng.random((5, 3))
        ls = np.array([0.3, 1.2, 0.7])
        np.testing.assert_allclose(kernel_matrix(KernelSpec(ls, 1.7), A, B), rbf_dense(A, B, ls, 1.7), atol=1e-14)


class TestPosterior:
    def test_empty_data_is_prior(self):
        spec = KernelSpec(np.ones(2))
        model = condition(spec, np.zeros((0, 2)), np.zeros(0), (0, 1))
        Xq = np.random.default_rng(1).random((3, 2))
        mom = posterior(model, Xq)
        np.testing.assert_array_equal(mom.mean, 0.0)
        np.testing.assert_allclose(mom.covariance, kernel_matrix(spec, Xq, Xq))

    def test_noiseless_interpolation(self):
        spec = KernelSpec(np.array([0.3]), noise_variance=1e-12)
        X = np.array([[0.1], [0.5], [0.9]])
        y = np.array([0.3, -1.0, 2.0])
        mean, var = posterior_mean_var(condition(spec, X, y, (0,)), X)
        np.testing.assert_allclose(mean, y, atol=1e-6)
        np.testing.assert_allclose(var, 0.0, atol=1e-8)

    def test_matches_joint_conditioning_on_eight_points(self):
        rng = np.random.default_rng(2)
        X, Xq = rng.random((5, 2)), rng.random((3, 2))
        y = rng.standard_normal(5)
        ls = np.array([0.4, 0.8])
        mom = posterior(condition(KernelSpec(ls, 1.3, NOISE), X, y, (0, 1)), Xq)
        m, C = joint_conditioning(X, y, Xq, ls, 1.3, NOISE)
        np.testing.assert_allclose(mom.mean, m, atol=1e-8)
        np.testing.assert_allclose(mom.covariance, C, atol=1e-8)

    def test_reads_only_active_columns(self):
        rng = np.random.default_rng(3)
        V = rng.random((6, 4))
        y = rng.standard_normal(6)
        spec = KernelSpec(np.array([0.5, 0.5]))
        model = condition(spec, V, y, (0, 2))
        Vq = rng.random((2, 4))
        Vq2 = Vq.copy()
        Vq2[:, [1, 3]] = rng.random((2, 2))
        np.testing.assert_array_equal(posterior_mean_var(model, Vq)[0], posterior_mean_var(model, Vq2)[0])

    def test_mean_constant_shifts_mean_only(self):
        rng = np.random.default_rng(4)
        X, y = rng.random((5, 1)), rng.standard_normal(5)
        spec = KernelSpec(np.array([0.3]))
        a = condition(spec, X, y, (0,))
        b = condition(spec, X, y + 2.5, (0,), mean_constant=2.5)
        Xq = rng.random((4, 1))
        np.testing.assert_allclose(posterior(b, Xq).mean, posterior(a, Xq).mean + 2.5, atol=1e-12)
        np.testing.assert_allclose(posterior(b, Xq).covariance, posterior(a, Xq).covariance, atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(1, 6), q=st.integers(1, 2), seed=st.integers(0, 2**31 - 1))
    def test_property_matches_brute_force(self, n, q, seed):
        rng = np.random.default_rng(seed)
        D = 3
        X, Xq = rng.random((n, D)), rng.random((q, D))
        y = rng.standard_normal(n)
        ls = rng.uniform(0.2, 2.0, D)
        sf2 = rng.uniform(0.5, 2.0)
        mom = posterior(condition(KernelSpec(ls, sf2, 0.05), X, y, range(D)), Xq)
        m, C = joint_conditioning(X, y, Xq, ls, sf2, 0.05)
        np.testing.assert_allclose(mom.mean, m, atol=1e-8)
        np.testing.assert_allclose(mom.covariance, C, atol=1e-8)


class TestPredictive:
    def test_empty_unit(self):
        model = condition(KernelSpec(np.ones(2)), np.zeros((0, 2)), np.zeros(0), (0, 1))
        assert predictive_distribution(model, np.array([0.3, 0.3])) == (0.0, 1.0 + NOISE)

    def test_matches_posterior_diagonal(self):
        rng = np.random.default_rng(5)
        X, y = rng.random((8, 2)), rng.standard_normal(8)
        model = condition(KernelSpec(np.array([0.3, 0.6])), X, y, (0, 1))
        Xq = rng.random((10, 2))
        mom = posterior(model, Xq)
        for i in range(10):
            m, v = predictive_distribution(model, Xq[i])
            assert abs(m - mom.mean[i]) < 1e-12
            assert abs(v - (mom.covariance[i, i] + NOISE)) < 1e-12
            assert v >= NOISE


class TestMarginalLikelihood:
    def test_single_point_at_zero(self):
        model = condition(KernelSpec(np.ones(1)), np.array([[0.5]]), np.array([0.0]), (0,))
        np.testing.assert_allclose(log_marginal_likelihood(model), -0.5 * math.log(2 * math.pi * (1 + NOISE)))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        X, y = rng.random((7, 2)), rng.standard_normal(7)
        spec = KernelSpec(np.array([0.4, 0.9]))
        perm = rng.permutation(7)
        a = log_marginal_likelihood(condition(spec, X, y, (0, 1)))
        b = log_marginal_likelihood(condition(spec, X[perm], y[perm], (0, 1)))
        assert abs(a - b) < 1e-10

    def test_matches_dense_inverse(self):
        rng = np.random.default_rng(7)
        X, y = rng.random((6, 2)), rng.standard_normal(6)
        ls = np.array([0.5, 0.3])
        K = rbf_dense(X, X, ls, 1.2) + NOISE * np.eye(6)
        ref = -0.5 * y @ np.linalg.inv(K) @ y - 0.5 * np.log(np.linalg.det(K)) - 3 * math.log(2 * math.pi)
        assert abs(log_marginal_likelihood(condition(KernelSpec(ls, 1.2), X, y, (0, 1))) - ref) < 1e-8


class TestJointSample:
    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(8)
        X, y = rng.random((4, 1)), rng.standard_normal(4)
        model = condition(KernelSpec(np.array([0.4])), X, y, (0,))
        Xq = rng.random((3, 1))
        draws = joint_sample(model, Xq, 4096, seed=1)
        mom = posterior(model, Xq)
        se = np.sqrt(np.diag(mom.covariance) / 4096)
        assert np.all(np.abs(draws.mean(0) - mom.mean) <= 3 * se + 1e-12)

    def test_seed_is_deterministic(self):
        model = condition(KernelSpec(np.ones(1)), np.array([[0.2]]), np.array([1.0]), (0,))
        Xq = np.array([[0.1], [0.7]])
        np.testing.assert_array_equal(joint_sample(model, Xq, 16, seed=3), joint_sample(model, Xq, 16, seed=3))

    def test_noiseless_point_is_pinned(self):
        model = condition(KernelSpec(np.ones(1), noise_variance=1e-12), np.array([[0.2]]), np.array([1.0]), (0,))
        draws = joint_sample(model, np.array([[0.2]]), 200, seed=0)
        np.testing.assert_allclose(draws, 1.0, atol=1e-3)

    def test_bad_base_samples(self):
        model = condition(KernelSpec(np.ones(1)), np.zeros((0, 1)), np.zeros(0), (0,))
        with pytest.raises(ContractError):
            joint_sample(model, np.zeros((2, 1)), 4, base_samples=np.zeros((4, 3)))


class TestKL:
    def test_identical(self):
        assert kl_univariate((0.3, 2.0), (0.3, 2.0)) == 0.0

    def test_mean_shift(self):
        assert kl_univariate((0.0, 1.0), (1.0, 1.0)) == 0.5

    def test_variance_ratio(self):
        np.testing.assert_allclose(kl_univariate((0.0, 2.0), (0.0, 1.0)), 0.5 * (2 - 1 - math.log(2)), rtol=1e-14)

    def test_nonpositive_variance(self):
        with pytest.raises(ContractError):
            kl_univariate((0.0, 0.0), (0.0, 1.0))

    def test_multivariate_identical(self):
        m = GaussianMoments(np.array([0.1, 0.2]), np.array([[1.0, 0.3], [0.3, 2.0]]))
        assert kl_multivariate(m, m) == 0.0

    def test_diagonal_factorises(self):
        p = GaussianMoments(np.array([0.1, -0.4, 1.0]), np.diag([0.5, 1.5, 2.0]))
        q = GaussianMoments(np.array([0.0, 0.3, 0.2]), np.diag([1.0, 0.7, 3.0]))
        ref = sum(kl_univariate((p.mean[i], p.covariance[i, i]), (q.mean[i], q.covariance[i, i])) for i in range(3))
        assert abs(kl_multivariate(p, q) - ref) < 1e-10

    def test_full_covariance_oracle(self):
        rng = np.random.default_rng(9)
        A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        Sp, Sq = A @ A.T + 0.1 * np.eye(3), B @ B.T + 0.1 * np.eye(3)
        mp, mq = rng.standard_normal(3), rng.standard_normal(3)
        inv = np.linalg.inv(Sq)
        ref = 0.5 * (np.trace(inv @ Sp) + (mq - mp) @ inv @ (mq - mp) - 3
                     + np.log(np.linalg.det(Sq) / np.linalg.det(Sp)))
        assert abs(kl_multivariate(GaussianMoments(mp, Sp), GaussianMoments(mq, Sq)) - ref) < 1e-8


class TestCholesky:
    def test_jitter_rescues_singular(self):
        M = np.ones((3, 3))
        L, jitter = jittered_cholesky(M)
        assert jitter > 0
        np.testing.assert_allclose(L @ L.T, M + jitter * np.eye(3), atol=1e-12)


class TestFit:
    def test_recovers_lengthscale(self):
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = rng.random((40, 1))
            K = rbf_dense(X, X, [0.2], 1.0) + NOISE * np.eye(40)
            y = np.linalg.cholesky(K) @ rng.standard_normal(40)
            model = fit_hyperparameters(X, y, (0,), FitConfig(), seed=seed)
            hits += abs(math.log(model.spec.lengthscales[0]) - math.log(0.2)) <= 0.5
        assert hits >= 16

    def test_constant_outputs_push_signal_to_lower_bound(self):
        X = np.random.default_rng(0).random((10, 2))
        model = fit_hyperparameters(X, np.zeros(10), (0, 1), FitConfig(n_restarts=0, n_random=0))
        assert model.spec.signal_variance < 0.02

    def test_never_worse_than_unit_start(self):
        rng = np.random.default_rng(11)
        X = rng.random((15, 3))
        y = np.sin(6 * X[:, 0]) + 0.1 * rng.standard_normal(15)
        model = fit_hyperparameters(X, y, (0, 1, 2), FitConfig(), seed=0)
        unit = condition(KernelSpec(np.ones(3)), X, y, (0, 1, 2))
        assert log_marginal_likelihood(model) >= log_marginal_likelihood(unit) - 1e-9

    def test_standardize_keeps_mean_and_bounds(self):
        rng = np.random.default_rng(12)
        X = rng.random((12, 2))
        y = 0.6 + 0.05 * np.sin(5 * X[:, 0])
        model = fit_hyperparameters(X, y, (0, 1), FitConfig(standardize=True), seed=0)
        assert model.mean_constant == pytest.approx(y.mean())
        assert model.spec.signal_variance >= 0.01 * y.var() * (1 - 1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            fit_hyperparameters(np.zeros((0, 1)), np.zeros(0), (0,))
