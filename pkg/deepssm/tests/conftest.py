"""
Pytest configuration and fixtures for deepssm tests.
"""

import numpy as np
import pytest

from deepssm.models import ModelConfig, PipelineConfig
from deepssm.services.market_data import read_ohlcv_csv
from deepssm.services.ssm import ModelParameters, Role, build_stack, factor_shapes
from deepssm.utils import data_file


# =============================================================================
# Random Model Fixtures
# =============================================================================

def _random_spd(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    a = rng.uniform(-1.0, 1.0, size=(n, n))
    return scale * (a @ a.T / n + 0.5 * np.eye(n))


@pytest.fixture
def make_params():
    """Factory for random parameter sets with a stable transition (spectral radius 0.9)."""

    def _make(seed: int, n_z: int = 3, n_x: int = 3, n_y: int = 1, layers: int = 3,
              noise: float = 0.1, stable: bool = True) -> ModelParameters:
        rng = np.random.default_rng(seed)
        stacks = {}
        for role in Role:
            factors = []
            for index, shape in enumerate(factor_shapes(role, n_z, n_x, n_y)):
                if index < layers:
                    factors.append(rng.uniform(0.0, 1.0, size=shape))
                else:
                    factors.append(np.eye(*shape))
            stacks[role] = build_stack(role, factors, layers)
        if stable:
            state = stacks[Role.STATE]
            radius = float(np.max(np.abs(np.linalg.eigvals(state.matrix))))
            if radius > 0:
                stacks[Role.STATE] = state.with_factor(0, state.factors[0] * 0.9 / radius)
        return ModelParameters(
            state_stack=stacks[Role.STATE],
            control_stack=stacks[Role.CONTROL],
            obs_stack=stacks[Role.OBSERVATION],
            q_cov=_random_spd(rng, n_z, noise),
            r_cov=_random_spd(rng, n_x, noise),
            z0_mean=rng.normal(size=n_z),
            p0_cov=_random_spd(rng, n_z, 1.0),
        )

    return _make


@pytest.fixture
def make_sequence():
    """Factory for random (obs, controls) arrays of a given length."""

    def _make(seed: int, steps: int, n_x: int = 3, n_y: int = 1):
        rng = np.random.default_rng(seed + 10_000)
        return rng.normal(size=(steps, n_x)), rng.uniform(0.0, 2.0, size=(steps, n_y))

    return _make


# =============================================================================
# Data Fixtures
# =============================================================================

@pytest.fixture
def btc_csv_path():
    return data_file("BTC-USD.csv")


@pytest.fixture
def btc_series(btc_csv_path):
    return read_ohlcv_csv(btc_csv_path)


@pytest.fixture
def fast_config():
    """Small window and few EM iterations so walk-forward tests stay quick."""
    return ModelConfig(n_z=3, window=20, em_iters=3, seed=1)


@pytest.fixture
def pipeline_config():
    return PipelineConfig()


@pytest.fixture
def csv_text():
    """Three well-formed Yahoo rows."""
    return (
        "Date,Open,High,Low,Close,Adj Close,Volume\n"
        "2021-01-01,100.0,110.0,95.0,105.0,105.0,1000\n"
        "2021-01-02,105.0,112.0,101.0,110.0,110.0,1200\n"
        "2021-01-03,110.0,115.0,104.0,108.0,108.0,900\n"
    )
