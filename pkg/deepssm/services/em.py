"""
EM learning of the multi-linear SSM.

E-step: Kalman filter + RTS smoother, reduced to eight 1/K-normalized
second-moment statistics (Σ, Φ, B, C, A, F, I, Δ).

M-step: one Gauss-Seidel sweep over the nine factor slots in the order
T10, T11, T12, T20, T21, T22, D0, D1, D2. Each slot is the projected
least-squares minimizer of the trace objective with every other factor held
at its freshest value. Writing the composite containing the target X as
M = L X Rt, the stationary point is

    X = (Lᵀ W⁻¹ L)⁺ (Lᵀ W⁻¹ G Rtᵀ) (Rt H Rtᵀ)⁺

with (W, G, H) = (Q, C − T2 Fᵀ, Φ) for state factors, (Q, A − T1 F, I) for
control factors and (R, B, Σ) for observation factors, followed by a ReLU.

Cost per window: the E-step is O(τ·N_z³) with plain Cholesky (O(τ·N_z^2.376)
with fast matrix multiplication); a sweep adds O(N_z³) per slot independent
of τ. Q, R and the prior covariance are never re-estimated.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, pinvh

from deepssm.errors import DimensionError, InferenceError
from deepssm.models import EmReport, ModelConfig
from deepssm.services.kalman import FilterResult, SmootherResult, as_rows, kalman_filter, rts_smooth, symmetrize
from deepssm.services.ssm import FactorPosition, ModelParameters, Role, compose

logger = logging.getLogger(__name__)

PINV_RTOL = 1e-10


# =============================================================================
# Sufficient statistics
# =============================================================================

@dataclass(frozen=True)
class SufficientStats:
    sigma: np.ndarray   # Σ  (N_z, N_z)
    phi: np.ndarray     # Φ  (N_z, N_z)
    b: np.ndarray       # B  (N_x, N_z)
    c: np.ndarray       # C  (N_z, N_z)
    a: np.ndarray       # A  (N_z, N_y)
    f: np.ndarray       # F  (N_z, N_y)
    i_mat: np.ndarray   # I  (N_y, N_y)
    delta: np.ndarray   # Δ  (N_x, N_x)

    @classmethod
    def zeros(cls, n_z: int, n_x: int, n_y: int) -> "SufficientStats":
        return cls(
            sigma=np.zeros((n_z, n_z)),
            phi=np.zeros((n_z, n_z)),
            b=np.zeros((n_x, n_z)),
            c=np.zeros((n_z, n_z)),
            a=np.zeros((n_z, n_y)),
            f=np.zeros((n_z, n_y)),
            i_mat=np.zeros((n_y, n_y)),
            delta=np.zeros((n_x, n_x)),
        )


def compute_sufficient_stats(smo: SmootherResult, filt: FilterResult, obs, controls) -> SufficientStats:
    """Normalized sums over k = 1..K; the k=1 "previous" terms use the smoothed prior and G0."""
    K = smo.length
    if filt.length != K:
        raise DimensionError(f"smoother has {K} steps but filter has {filt.length}")
    n_z = smo.smoothed_means.shape[1]
    x = np.asarray(obs, dtype=float)
    if x.ndim != 2 or x.shape[0] != K:
        raise DimensionError(f"obs must have {K} rows, got shape {x.shape}")
    u = np.asarray(controls, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1)
    if u.shape[0] != K:
        raise DimensionError(f"controls must have {K} rows, got shape {u.shape}")
    if smo.gains.shape[0] != K - 1:
        raise DimensionError("smoother gains are missing")

    z = smo.smoothed_means
    P = smo.smoothed_covs
    z_prev = np.vstack([smo.prior_smoothed.mean[None, :], z[:-1]])
    P_prev = np.concatenate([smo.prior_smoothed.cov[None, :, :], P[:-1]], axis=0)
    G_prev = np.concatenate([smo.prior_gain.reshape(1, n_z, n_z), smo.gains], axis=0)

    return SufficientStats(
        sigma=symmetrize((P.sum(axis=0) + z.T @ z) / K),
        phi=symmetrize((P_prev.sum(axis=0) + z_prev.T @ z_prev) / K),
        b=(x.T @ z) / K,
        c=(np.einsum("kij,klj->il", P, G_prev) + z.T @ z_prev) / K,
        a=(z.T @ u) / K,
        f=(z_prev.T @ u) / K,
        i_mat=symmetrize((u.T @ u) / K),
        delta=symmetrize((x.T @ x) / K),
    )


def q_objective(params: ModelParameters, stats: SufficientStats, q_cov: np.ndarray, r_cov: np.ndarray) -> float:
    """Per-step expected negative complete-data log-likelihood, up to parameter-free terms."""
    T1, T2, D = params.transition, params.control_matrix, params.emission
    s = stats
    state = (
        s.sigma - T1 @ s.c.T - s.c @ T1.T - s.a @ T2.T - T2 @ s.a.T
        + T1 @ s.phi @ T1.T + T1 @ s.f @ T2.T + T2 @ s.f.T @ T1.T + T2 @ s.i_mat @ T2.T
    )
    observation = s.delta - s.b @ D.T - D @ s.b.T + D @ s.sigma @ D.T
    return 0.5 * float(np.trace(np.linalg.solve(q_cov, state)) + np.trace(np.linalg.solve(r_cov, observation)))


# =============================================================================
# M-step
# =============================================================================

@dataclass(frozen=True)
class FactorUpdate:
    matrix: np.ndarray
    degenerate: bool = False
    # True when the unprojected minimizer had a negative entry.
    clamped: bool = False


@dataclass
class SweepReport:
    solved: list[FactorPosition] = field(default_factory=list)
    clamped: list[FactorPosition] = field(default_factory=list)
    degenerate: list[FactorPosition] = field(default_factory=list)


def _neighbours(params: ModelParameters, target: FactorPosition) -> tuple[np.ndarray, np.ndarray]:
    """Products of the factors left and right of the target within its stack."""
    factors = params.stack(target.role).factors
    rows, cols = factors[target.index].shape
    left = compose(factors[: target.index]) if target.index > 0 else np.eye(rows)
    right = compose(factors[target.index + 1:]) if target.index < len(factors) - 1 else np.eye(cols)
    return left, right


def _target_terms(params: ModelParameters, stats: SufficientStats, q_cov, r_cov, role: Role):
    if role is Role.STATE:
        return q_cov, stats.c - params.control_matrix @ stats.f.T, stats.phi
    if role is Role.CONTROL:
        return q_cov, stats.a - params.transition @ stats.f, stats.i_mat
    return r_cov, stats.b, stats.sigma


def update_factor(
    target: FactorPosition,
    params: ModelParameters,
    stats: SufficientStats,
    q_cov: np.ndarray,
    r_cov: np.ndarray,
    nonnegative: bool = True,
) -> FactorUpdate:
    """Minimize the trace objective over one factor, others frozen, then project onto X ≥ 0."""
    shape = params.factor(target).shape
    noise, cross, second_moment = _target_terms(params, stats, q_cov, r_cov, target.role)
    left, right = _neighbours(params, target)

    try:
        weighted_left = cho_solve(cho_factor(noise, lower=True), left)
        gram_left = symmetrize(left.T @ weighted_left)
        gram_right = symmetrize(right @ second_moment @ right.T)
        if not np.any(gram_left) or not np.any(gram_right):
            raise ValueError("all-zero Gram matrix")
        solution = (
            pinvh(gram_left, rtol=PINV_RTOL)
            @ (weighted_left.T @ cross @ right.T)
            @ pinvh(gram_right, rtol=PINV_RTOL)
        )
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.debug(f"Degenerate update for {target.name}: {exc}")
        return FactorUpdate(np.zeros(shape), degenerate=True)

    if not np.all(np.isfinite(solution)):
        logger.debug(f"Degenerate update for {target.name}: non-finite solution")
        return FactorUpdate(np.zeros(shape), degenerate=True)
    if not nonnegative:
        return FactorUpdate(solution)
    clamped = bool(np.any(solution < 0))
    return FactorUpdate(np.maximum(solution, 0.0), clamped=clamped)


def m_step(
    params: ModelParameters,
    stats: SufficientStats,
    q_cov: np.ndarray,
    r_cov: np.ndarray,
    nonnegative: bool = True,
) -> tuple[ModelParameters, SweepReport]:
    """One Gauss-Seidel sweep; identity-fixed slots are skipped."""
    report = SweepReport()
    for position in params.learnable_positions():
        update = update_factor(position, params, stats, q_cov, r_cov, nonnegative=nonnegative)
        params = params.with_factor(position, update.matrix)
        report.solved.append(position)
        if update.clamped:
            report.clamped.append(position)
        if update.degenerate:
            report.degenerate.append(position)
    return params, report


# =============================================================================
# EM loop
# =============================================================================

def _e_step(params: ModelParameters, x: np.ndarray, u: np.ndarray, iteration: int):
    try:
        filt = kalman_filter(params, x, u)
        smo = rts_smooth(params, filt)
    except InferenceError as exc:
        raise exc.at_iteration(iteration) from exc
    return filt, smo


def em_fit(
    params0: ModelParameters,
    obs,
    controls,
    config: ModelConfig,
) -> tuple[ModelParameters, SmootherResult, EmReport]:
    """
    Alternate E- and M-steps for up to ``config.em_iters`` iterations.

    After each sweep the stacks are rebalanced (``ModelParameters.balanced``)
    so the factor-entry change is measured on one representative per
    operator. Stops early once the largest factor-entry change drops below
    ``param_tol`` or the log-likelihood moves by less than ``loglik_tol``.
    A closing E-step under the returned parameters supplies the returned
    smoother output and ``final_log_likelihood``; it is not counted as an
    iteration.
    """
    x = as_rows(obs, params0.n_x, "obs")
    u = as_rows(controls, params0.n_y, "controls")
    params = params0
    trace: list[float] = []
    clamped_iterations: list[int] = []
    changes: list[float] = []
    delta = float("inf")
    converged = False

    for iteration in range(1, config.em_iters + 1):
        filt, smo = _e_step(params, x, u, iteration)
        trace.append(filt.log_likelihood)
        stats = compute_sufficient_stats(smo, filt, x, u)

        updated, sweep = m_step(params, stats, params.q_cov, params.r_cov, nonnegative=config.nonnegative)
        if sweep.clamped:
            clamped_iterations.append(iteration)
        if sweep.degenerate:
            logger.debug(f"EM iteration {iteration}: degenerate updates {[p.name for p in sweep.degenerate]}")
        updated = updated.balanced()
        delta = updated.max_abs_delta(params)
        changes.append(delta)
        params = updated

        if delta < config.param_tol:
            converged = True
        elif len(trace) >= 2 and abs(trace[-1] - trace[-2]) < config.loglik_tol:
            converged = True
        if converged:
            break

    filt, smo = _e_step(params, x, u, len(trace) + 1)
    report = EmReport(
        trace=trace,
        iterations_run=len(trace),
        converged=converged,
        final_param_change=delta,
        final_log_likelihood=filt.log_likelihood,
        clamped_iterations=clamped_iterations,
        param_changes=changes,
    )
    if converged:
        logger.debug(f"EM converged after {report.iterations_run} iterations (LL={filt.log_likelihood:.4f})")
    else:
        logger.info(
            f"EM stopped at the iteration cap {config.em_iters} "
            f"(last change {delta:.3e}, LL={filt.log_likelihood:.4f})"
        )
    return params, smo, report
