"""
Exact E-step for a fixed parameter set: Kalman filter, RTS smoother and the
innovation-form log-likelihood.

Only the composites T1 = compose(state), T2 = compose(control) and
D = compose(observation) enter the recursions. Covariances are symmetrized
after every step. Inverses of S_k and P_{k+1}^- go through a Cholesky
factorization with one jitter retry before giving up.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from deepssm.errors import DimensionError, InferenceError
from deepssm.services.ssm import ModelParameters

logger = logging.getLogger(__name__)

JITTER_SCALE = 1e-9
PSD_TOLERANCE = 1e-9
LOG_2PI = float(np.log(2.0 * np.pi))


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def spd_factor(matrix: np.ndarray, what: str, step: int):
    """Cholesky factor of an SPD matrix, retrying once with 1e-9 * trace/N jitter."""
    try:
        return cho_factor(matrix, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        pass
    n = matrix.shape[0]
    trace = float(np.trace(matrix))
    if not np.isfinite(trace):
        raise InferenceError(step, what)
    jitter = JITTER_SCALE * (trace / n if trace > 0 else 1.0)
    logger.warning(f"{what} not positive definite at k={step}; retrying with jitter {jitter:.3e}")
    try:
        return cho_factor(matrix + jitter * np.eye(n), lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise InferenceError(step, what) from exc


def _log_det(factor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of the latent state at one time step."""
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", symmetrize(cov))

    def is_psd(self, tol: float = PSD_TOLERANCE) -> bool:
        return bool(np.min(np.linalg.eigvalsh(self.cov)) >= -tol)


@dataclass(frozen=True)
class FilterResult:
    """Per-step predicted/filtered moments, innovations and gains of one filter pass."""
    prior: GaussianBelief
    predicted_means: np.ndarray   # (K, n_z)  z_k^-
    predicted_covs: np.ndarray    # (K, n_z, n_z)  P_k^-
    filtered_means: np.ndarray    # (K, n_z)  z̄_k
    filtered_covs: np.ndarray     # (K, n_z, n_z)  P_k
    innovations: np.ndarray       # (K, n_x)  y_k
    innovation_covs: np.ndarray   # (K, n_x, n_x)  S_k
    gains: np.ndarray             # (K, n_z, n_x)  K_k
    log_likelihood: float

    @property
    def length(self) -> int:
        return self.filtered_means.shape[0]

    @property
    def last(self) -> GaussianBelief:
        return GaussianBelief(self.filtered_means[-1], self.filtered_covs[-1])


@dataclass(frozen=True)
class SmootherResult:
    """Smoothed moments of one RTS pass, plus the smoothed prior used at the k=1 boundary."""
    smoothed_means: np.ndarray    # (K, n_z)  z_k^s
    smoothed_covs: np.ndarray     # (K, n_z, n_z)  P_k^s
    gains: np.ndarray             # (K-1, n_z, n_z)  G_k pairs step k with k+1
    prior_smoothed: GaussianBelief
    prior_gain: np.ndarray        # G_0 pairs the prior with step 1

    @property
    def length(self) -> int:
        return self.smoothed_means.shape[0]

    @property
    def last(self) -> GaussianBelief:
        return GaussianBelief(self.smoothed_means[-1], self.smoothed_covs[-1])


def as_rows(values, width: int, name: str) -> np.ndarray:
    """Coerce a sequence of vectors (or scalars when width is 1) to a (K, width) array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1 and width == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise DimensionError(f"{name} must have shape (K, {width}), got {arr.shape}")
    return arr


def predict_step(params: ModelParameters, mean: np.ndarray, cov: np.ndarray, control: np.ndarray):
    """z^- = T1 z + T2 u,  P^- = T1 P T1ᵀ + Q."""
    T1 = params.transition
    z_pred = T1 @ mean + params.control_matrix @ control
    P_pred = symmetrize(T1 @ cov @ T1.T + params.q_cov)
    return z_pred, P_pred


def kalman_filter(params: ModelParameters, obs, controls) -> FilterResult:
    """Forward pass over K steps; k=1 predicts from the prior (z̄0, P0)."""
    x = as_rows(obs, params.n_x, "obs")
    u = as_rows(controls, params.n_y, "controls")
    if x.shape[0] != u.shape[0]:
        raise DimensionError(f"obs has {x.shape[0]} steps but controls has {u.shape[0]}")
    K = x.shape[0]
    if K < 1:
        raise DimensionError("need at least one observation")

    n_z, n_x = params.n_z, params.n_x
    D, R = params.emission, params.r_cov
    eye = np.eye(n_z)

    predicted_means = np.empty((K, n_z))
    predicted_covs = np.empty((K, n_z, n_z))
    filtered_means = np.empty((K, n_z))
    filtered_covs = np.empty((K, n_z, n_z))
    innovations = np.empty((K, n_x))
    innovation_covs = np.empty((K, n_x, n_x))
    gains = np.empty((K, n_z, n_x))

    z, P = params.z0_mean, params.p0_cov
    log_likelihood = 0.0
    for k in range(K):
        z_pred, P_pred = predict_step(params, z, P, u[k])

        y = x[k] - D @ z_pred
        S = symmetrize(D @ P_pred @ D.T + R)
        factor = spd_factor(S, "innovation covariance S", k + 1)
        gain = cho_solve(factor, D @ P_pred).T

        z = z_pred + gain @ y
        # Joseph form keeps P symmetric PSD under rounding.
        A = eye - gain @ D
        P = symmetrize(A @ P_pred @ A.T + gain @ R @ gain.T)

        log_likelihood -= 0.5 * (n_x * LOG_2PI + _log_det(factor) + float(y @ cho_solve(factor, y)))

        predicted_means[k], predicted_covs[k] = z_pred, P_pred
        filtered_means[k], filtered_covs[k] = z, P
        innovations[k], innovation_covs[k], gains[k] = y, S, gain

    return FilterResult(
        prior=GaussianBelief(params.z0_mean, params.p0_cov),
        predicted_means=predicted_means,
        predicted_covs=predicted_covs,
        filtered_means=filtered_means,
        filtered_covs=filtered_covs,
        innovations=innovations,
        innovation_covs=innovation_covs,
        gains=gains,
        log_likelihood=log_likelihood,
    )


def _smoother_gain(T1: np.ndarray, cov: np.ndarray, P_pred_next: np.ndarray, step: int) -> np.ndarray:
    """G = P T1ᵀ (P_next^-)^-1."""
    factor = spd_factor(P_pred_next, "predicted covariance P^-", step)
    return cho_solve(factor, T1 @ cov).T


def rts_smooth(params: ModelParameters, filt: FilterResult, controls=None) -> SmootherResult:
    """Backward pass initialized at k=K with the filtered belief, extended one step to the prior."""
    if controls is not None and as_rows(controls, params.n_y, "controls").shape[0] != filt.length:
        raise DimensionError("controls length differs from the filtered sequence")
    T1 = params.transition
    K = filt.length
    n_z = params.n_z

    means = filt.filtered_means.copy()
    covs = filt.filtered_covs.copy()
    gains = np.zeros((max(K - 1, 0), n_z, n_z))
    for k in range(K - 2, -1, -1):
        G = _smoother_gain(T1, filt.filtered_covs[k], filt.predicted_covs[k + 1], k + 2)
        means[k] = filt.filtered_means[k] + G @ (means[k + 1] - filt.predicted_means[k + 1])
        covs[k] = symmetrize(filt.filtered_covs[k] + G @ (covs[k + 1] - filt.predicted_covs[k + 1]) @ G.T)
        gains[k] = G

    prior = filt.prior
    G0 = _smoother_gain(T1, prior.cov, filt.predicted_covs[0], 1)
    prior_mean = prior.mean + G0 @ (means[0] - filt.predicted_means[0])
    prior_cov = prior.cov + G0 @ (covs[0] - filt.predicted_covs[0]) @ G0.T

    return SmootherResult(
        smoothed_means=means,
        smoothed_covs=covs,
        gains=gains,
        prior_smoothed=GaussianBelief(prior_mean, prior_cov),
        prior_gain=G0,
    )
