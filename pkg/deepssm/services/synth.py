"""
Synthetic data from the multi-linear model, for oracle tests and the ``synth`` command.
"""

import logging
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from deepssm.errors import ConfigurationError
from deepssm.models import ModelConfig
from deepssm.services.market_data import FEATURES, REQUIRED_COLUMNS
from deepssm.services.ssm import (
    FactorPosition,
    ModelParameters,
    Role,
    build_stack,
    factor_shapes,
    identity_factor,
)

logger = logging.getLogger(__name__)

SPECTRAL_RADIUS = 0.8
CONTROL_LEVEL = 1.0
CONTROL_PERSISTENCE = 0.5
CONTROL_NOISE = 0.2
START_DATE = date(2018, 1, 1)


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    """F with F Fᵀ = cov; zero covariances give a zero factor."""
    eigvals, eigvecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def make_truth_parameters(config: ModelConfig, seed: int | None = None) -> ModelParameters:
    """
    A stable nonnegative ground truth: ρ(T1) = 0.8, steady-state latents with
    mean 1 under a unit control, and observation rows scaled to a steady state of 1.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    stacks = {}
    for role in Role:
        factors = []
        for index, shape in enumerate(factor_shapes(role, config.n_z, config.n_x, config.n_y)):
            if index < config.layers:
                factors.append(rng.uniform(0.1, 1.0, size=shape))
            else:
                factors.append(identity_factor(shape))
        stacks[role] = build_stack(role, factors, config.layers)

    params = ModelParameters(
        state_stack=stacks[Role.STATE],
        control_stack=stacks[Role.CONTROL],
        obs_stack=stacks[Role.OBSERVATION],
        q_cov=config.sigma_q ** 2 * np.eye(config.n_z),
        r_cov=config.sigma_r ** 2 * np.eye(config.n_x),
        z0_mean=np.zeros(config.n_z),
        p0_cov=config.sigma_p ** 2 * np.eye(config.n_z),
    )

    radius = float(np.max(np.abs(np.linalg.eigvals(params.transition))))
    params = params.with_factor(FactorPosition.T10, params.factor(FactorPosition.T10) * SPECTRAL_RADIUS / radius)

    steady = np.linalg.solve(np.eye(config.n_z) - params.transition, params.control_matrix @ np.ones(config.n_y))
    params = params.with_factor(FactorPosition.T20, params.factor(FactorPosition.T20) / float(np.mean(steady)))
    steady = steady / float(np.mean(steady))

    row_levels = params.emission @ steady
    params = params.with_factor(FactorPosition.D0, params.factor(FactorPosition.D0) / row_levels[:, None])
    return params.with_prior(steady, params.p0_cov)


def ar1_controls(steps: int, n_y: int, rng: np.random.Generator) -> np.ndarray:
    """Positive AR(1) controls fluctuating around 1."""
    u = np.empty((steps, n_y))
    level = np.full(n_y, CONTROL_LEVEL)
    for k in range(steps):
        level = CONTROL_LEVEL + CONTROL_PERSISTENCE * (level - CONTROL_LEVEL) + CONTROL_NOISE * rng.standard_normal(n_y)
        u[k] = np.abs(level)
    return u


def simulate(params: ModelParameters, controls, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (latents, observations), each (K, ·), with z_0 from the prior."""
    u = np.asarray(controls, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1)
    T1, T2, D = params.transition, params.control_matrix, params.emission
    q_factor, r_factor = _noise_factor(params.q_cov), _noise_factor(params.r_cov)

    z = params.z0_mean + _noise_factor(params.p0_cov) @ rng.standard_normal(params.n_z)
    latents = np.empty((u.shape[0], params.n_z))
    observations = np.empty((u.shape[0], params.n_x))
    for k in range(u.shape[0]):
        z = T1 @ z + T2 @ u[k] + q_factor @ rng.standard_normal(params.n_z)
        latents[k] = z
        observations[k] = D @ z + r_factor @ rng.standard_normal(params.n_x)
    return latents, observations


@dataclass(frozen=True)
class SyntheticData:
    params: ModelParameters
    controls: np.ndarray
    latents: np.ndarray
    observations: np.ndarray

    @property
    def dates(self) -> list[date]:
        return [START_DATE + timedelta(days=k) for k in range(self.observations.shape[0])]


def synthesize(config: ModelConfig, steps: int) -> SyntheticData:
    rng = np.random.default_rng(config.seed)
    params = make_truth_parameters(config)
    controls = ar1_controls(steps, config.n_y, rng)
    latents, observations = simulate(params, controls, rng)
    logger.info(f"Simulated {steps} steps (layers={config.layers}, n_z={config.n_z}, seed={config.seed})")
    return SyntheticData(params, controls, latents, observations)


def to_ohlcv_frame(data: SyntheticData) -> pd.DataFrame:
    """Map the five observed features onto the Yahoo columns; Close mirrors Adj Close."""
    if data.observations.shape[1] != len(FEATURES):
        raise ConfigurationError(f"OHLCV export needs n_x={len(FEATURES)}", field="n_x")
    columns = dict(zip(FEATURES, data.observations.T))
    if np.any(data.observations[:, :4] <= 0):
        raise ConfigurationError("simulated prices are not positive; lower sigma_r", field="sigma_r")
    frame = pd.DataFrame({
        "Date": [d.isoformat() for d in data.dates],
        "Open": columns["open"],
        "High": columns["high"],
        "Low": columns["low"],
        "Close": columns["adj_close"],
        "Adj Close": columns["adj_close"],
        "Volume": np.abs(columns["volume"]),
    })
    return frame[list(REQUIRED_COLUMNS)]


def write_synthetic_csv(data: SyntheticData, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_ohlcv_frame(data).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    logger.info(f"Synthetic CSV written: {path}")
    return path
