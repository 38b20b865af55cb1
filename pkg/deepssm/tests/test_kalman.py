"""
Tests for the Kalman filter and RTS smoother.

Small random instances are checked against a brute-force oracle that builds
the full joint Gaussian over (z_0..z_K, x_1..x_K) and conditions it directly.
"""

import logging

import numpy as np
import pytest
from scipy.linalg import block_diag
from scipy.stats import multivariate_normal

from deepssm.errors import DimensionError, InferenceError
from deepssm.services.kalman import GaussianBelief, kalman_filter, rts_smooth, spd_factor
from deepssm.services.ssm import FactorPosition, ModelParameters, Role, build_stack

SEEDS = range(100)
STEPS = 10


# =============================================================================
# Helpers
# =============================================================================

def scalar_params(t1=1.0, t2=0.0, d=1.0, q=1.0, r=1.0, z0=0.0, p0=1.0) -> ModelParameters:
    """1-D model with a single learnable layer."""
    def stack(role, first):
        return build_stack(role, [np.array([[first]]), np.eye(1), np.eye(1)], 1)

    return ModelParameters(
        state_stack=stack(Role.STATE, t1),
        control_stack=stack(Role.CONTROL, t2),
        obs_stack=stack(Role.OBSERVATION, d),
        q_cov=np.array([[q]]),
        r_cov=np.array([[r]]),
        z0_mean=np.array([z0]),
        p0_cov=np.array([[p0]]),
    )


class JointGaussian:
    """Exact moments of (z_0..z_K, x_1..x_K) as affine maps of independent Gaussian noise."""

    def __init__(self, params: ModelParameters, controls: np.ndarray):
        n_z, n_x = params.n_z, params.n_x
        steps = controls.shape[0]
        T1, T2, D = params.transition, params.control_matrix, params.emission
        powers = [np.linalg.matrix_power(T1, p) for p in range(steps + 1)]

        # w = [z_0, v1_1..v1_K, v2_1..v2_K]
        width = n_z + steps * (n_z + n_x)
        mz = np.zeros(((steps + 1) * n_z, width))
        cz = np.zeros((steps + 1) * n_z)
        mz[:n_z, :n_z] = np.eye(n_z)
        for k in range(1, steps + 1):
            rows = slice(k * n_z, (k + 1) * n_z)
            mz[rows, :n_z] = powers[k]
            for j in range(1, k + 1):
                start = n_z + (j - 1) * n_z
                mz[rows, start:start + n_z] = powers[k - j]
                cz[rows] += powers[k - j] @ T2 @ controls[j - 1]

        mx = np.zeros((steps * n_x, width))
        cx = np.zeros(steps * n_x)
        for k in range(1, steps + 1):
            rows = slice((k - 1) * n_x, k * n_x)
            mx[rows] = D @ mz[k * n_z:(k + 1) * n_z]
            cx[rows] = D @ cz[k * n_z:(k + 1) * n_z]
            start = n_z + steps * n_z + (k - 1) * n_x
            mx[rows, start:start + n_x] = np.eye(n_x)

        mean_w = np.zeros(width)
        mean_w[:n_z] = params.z0_mean
        cov_w = block_diag(params.p0_cov, *([params.q_cov] * steps), *([params.r_cov] * steps))

        self.n_z, self.n_x = n_z, n_x
        self.mean_z = mz @ mean_w + cz
        self.mean_x = mx @ mean_w + cx
        self.cov_zz = mz @ cov_w @ mz.T
        self.cov_zx = mz @ cov_w @ mx.T
        self.cov_xx = mx @ cov_w @ mx.T

    def _block(self, k: int) -> slice:
        return slice(k * self.n_z, (k + 1) * self.n_z)

    def posterior(self, obs: np.ndarray, k: int, j: int, n_obs: int):
        """Mean of z_k and Cov(z_k, z_j) given x_1..x_{n_obs}."""
        cols = slice(0, n_obs * self.n_x)
        x = obs.ravel()[cols]
        cov_xx = self.cov_xx[cols, cols]
        zk, zj = self._block(k), self._block(j)
        mean = self.mean_z[zk] + self.cov_zx[zk, cols] @ np.linalg.solve(cov_xx, x - self.mean_x[cols])
        cov = self.cov_zz[zk, zj] - self.cov_zx[zk, cols] @ np.linalg.solve(cov_xx, self.cov_zx[zj, cols].T)
        return mean, cov

    def log_likelihood(self, obs: np.ndarray) -> float:
        return float(multivariate_normal(self.mean_x, self.cov_xx).logpdf(obs.ravel()))


# =============================================================================
# Hand examples
# =============================================================================

class TestScalarExamples:
    """Scalar chains that can be evaluated by hand."""

    def test_single_step(self):
        """T1=D=Q=R=P0=1, z0=0, x=(1): z1- = 0, P1- = 2, S1 = 3, K1 = 2/3, z1 = 2/3, P1 = 2/3."""
        filt = kalman_filter(scalar_params(), [[1.0]], [[0.0]])

        assert filt.predicted_means[0, 0] == pytest.approx(0.0)
        assert filt.predicted_covs[0, 0, 0] == pytest.approx(2.0)
        assert filt.innovation_covs[0, 0, 0] == pytest.approx(3.0)
        assert filt.gains[0, 0, 0] == pytest.approx(2.0 / 3.0)
        assert filt.filtered_means[0, 0] == pytest.approx(2.0 / 3.0)
        assert filt.filtered_covs[0, 0, 0] == pytest.approx(2.0 / 3.0)

    def test_single_step_log_likelihood(self):
        filt = kalman_filter(scalar_params(), [[1.0]], [[0.0]])
        expected = -0.5 * (np.log(2 * np.pi) + np.log(3.0) + 1.0 / 3.0)
        assert filt.log_likelihood == pytest.approx(expected, rel=1e-12)

    def test_exact_observation_limit(self):
        """With R -> 0 and D = 1 the filtered mean tracks the observations."""
        obs = np.array([0.3, -1.2, 2.5, 0.0, 7.1]).reshape(-1, 1)
        filt = kalman_filter(scalar_params(r=1e-14), obs, np.zeros((5, 1)))

        np.testing.assert_allclose(filt.filtered_means[:, 0], obs[:, 0], atol=1e-10)

    def test_one_dimensional_inputs_accepted(self):
        """Scalar models take plain sequences for obs and controls."""
        filt = kalman_filter(scalar_params(), [1.0, 2.0], [0.0, 0.0])
        assert filt.length == 2

    def test_two_step_smoother_matches_oracle(self):
        params = scalar_params()
        obs = np.array([[1.0], [0.5]])
        controls = np.zeros((2, 1))
        filt = kalman_filter(params, obs, controls)
        smo = rts_smooth(params, filt)

        mean, cov = JointGaussian(params, controls).posterior(obs, 1, 1, 2)
        assert smo.smoothed_means[0, 0] == pytest.approx(mean[0], abs=1e-12)
        assert smo.smoothed_covs[0, 0, 0] == pytest.approx(cov[0, 0], abs=1e-12)


# =============================================================================
# Oracle comparison
# =============================================================================

class TestJointGaussianOracle:
    """Filtered and smoothed marginals equal brute-force conditioning."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_marginals_match(self, seed, make_params, make_sequence):
        n_z = 1 + seed % 3
        n_x = 1 + (seed // 3) % 3
        params = make_params(seed, n_z=n_z, n_x=n_x)
        obs, controls = make_sequence(seed, STEPS, n_x=n_x)
        filt = kalman_filter(params, obs, controls)
        smo = rts_smooth(params, filt, controls)
        oracle = JointGaussian(params, controls)

        for k in range(1, STEPS + 1):
            mean, cov = oracle.posterior(obs, k, k, k)
            np.testing.assert_allclose(filt.filtered_means[k - 1], mean, rtol=0, atol=1e-8)
            np.testing.assert_allclose(filt.filtered_covs[k - 1], cov, rtol=0, atol=1e-8)

            mean, cov = oracle.posterior(obs, k, k, STEPS)
            np.testing.assert_allclose(smo.smoothed_means[k - 1], mean, rtol=0, atol=1e-8)
            np.testing.assert_allclose(smo.smoothed_covs[k - 1], cov, rtol=0, atol=1e-8)

        mean, cov = oracle.posterior(obs, 0, 0, STEPS)
        np.testing.assert_allclose(smo.prior_smoothed.mean, mean, rtol=0, atol=1e-8)
        np.testing.assert_allclose(smo.prior_smoothed.cov, cov, rtol=0, atol=1e-8)

        assert filt.log_likelihood == pytest.approx(oracle.log_likelihood(obs), rel=1e-9, abs=1e-8)

    @pytest.mark.parametrize("seed", range(10))
    def test_lag_one_cross_covariance(self, seed, make_params, make_sequence):
        """Cov(z_k, z_{k-1} | all x) = P_k^s G_{k-1}^T, including the prior pair."""
        params = make_params(seed)
        obs, controls = make_sequence(seed, STEPS)
        filt = kalman_filter(params, obs, controls)
        smo = rts_smooth(params, filt)
        oracle = JointGaussian(params, controls)

        gains = [smo.prior_gain, *smo.gains]
        for k in range(1, STEPS + 1):
            _, cross = oracle.posterior(obs, k, k - 1, STEPS)
            np.testing.assert_allclose(smo.smoothed_covs[k - 1] @ gains[k - 1].T, cross, rtol=0, atol=1e-8)


# =============================================================================
# Structural properties
# =============================================================================

class TestSmootherProperties:
    """Properties of the backward pass."""

    def test_terminal_step_equals_filtered(self, make_params, make_sequence):
        params = make_params(5)
        obs, controls = make_sequence(5, 12)
        filt = kalman_filter(params, obs, controls)
        smo = rts_smooth(params, filt)

        assert np.array_equal(smo.smoothed_means[-1], filt.filtered_means[-1])
        assert np.array_equal(smo.smoothed_covs[-1], filt.filtered_covs[-1])

    def test_single_step_smoother_is_filter(self, make_params, make_sequence):
        params = make_params(6)
        obs, controls = make_sequence(6, 1)
        filt = kalman_filter(params, obs, controls)
        smo = rts_smooth(params, filt)

        assert smo.gains.shape == (0, 3, 3)
        assert np.array_equal(smo.smoothed_means, filt.filtered_means)

    def test_no_dynamics_smoothing_is_filtering(self):
        """T1 = 0 makes every smoother gain zero."""
        params = scalar_params(t1=0.0)
        obs = np.array([[1.0], [-2.0], [0.5]])
        filt = kalman_filter(params, obs, np.zeros((3, 1)))
        smo = rts_smooth(params, filt)

        np.testing.assert_array_equal(smo.gains, 0.0)
        np.testing.assert_allclose(smo.smoothed_means, filt.filtered_means, atol=1e-15)

    def test_covariances_symmetric_psd(self, make_params, make_sequence):
        for seed in range(20):
            params = make_params(seed, n_z=3, n_x=2)
            obs, controls = make_sequence(seed, 15, n_x=2)
            filt = kalman_filter(params, obs, controls)
            smo = rts_smooth(params, filt)
            for covs in (filt.predicted_covs, filt.filtered_covs, smo.smoothed_covs):
                for cov in covs:
                    assert np.array_equal(cov, cov.T)
                    assert GaussianBelief(np.zeros(3), cov).is_psd()

    def test_invariant_to_factor_reordering(self, make_params, make_sequence):
        """Only the composites enter the recursions."""
        params = make_params(9, n_z=3, n_x=3)
        obs, controls = make_sequence(9, 8)
        merged = params.factor(FactorPosition.T10) @ params.factor(FactorPosition.T11)
        rescaled = params.with_factor(FactorPosition.T10, merged).with_factor(FactorPosition.T11, np.eye(3))
        np.testing.assert_allclose(rescaled.transition, params.transition, atol=1e-14)

        a = kalman_filter(params, obs, controls).log_likelihood
        b = kalman_filter(rescaled, obs, controls).log_likelihood
        assert a == pytest.approx(b, rel=1e-12)


# =============================================================================
# Error handling
# =============================================================================

class TestNumericalFailures:
    """Jitter retry and hard failures."""

    def test_zero_innovation_covariance_recovers_with_jitter(self, caplog):
        """D = 0 and R = 0 give S = 0; the jittered retry succeeds with a warning."""
        params = scalar_params(d=0.0, r=0.0)

        with caplog.at_level(logging.WARNING, logger="deepssm.services.kalman"):
            filt = kalman_filter(params, [[1.0]], [[0.0]])

        assert np.isfinite(filt.log_likelihood)
        assert "jitter" in caplog.text

    def test_negative_definite_raises_with_step(self):
        params = scalar_params(d=0.0, r=-1.0)

        with pytest.raises(InferenceError) as exc_info:
            kalman_filter(params, [[1.0], [2.0]], [[0.0], [0.0]])

        assert exc_info.value.step == 1
        assert exc_info.value.exit_code == 4

    def test_spd_factor_rejects_nan(self):
        with pytest.raises(InferenceError):
            spd_factor(np.array([[np.nan]]), "S", 3)

    def test_length_mismatch(self, make_params):
        params = make_params(1)
        with pytest.raises(DimensionError):
            kalman_filter(params, np.zeros((4, 3)), np.zeros((5, 1)))

    def test_wrong_width(self, make_params):
        params = make_params(1)
        with pytest.raises(DimensionError):
            kalman_filter(params, np.zeros((4, 2)), np.zeros((4, 1)))
