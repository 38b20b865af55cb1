"""Per-window feature standardization and its inverse."""

import logging
from dataclasses import dataclass

import numpy as np

from deepssm.errors import DimensionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScaleState:
    means: np.ndarray
    scales: np.ndarray
    # Columns whose window variance was zero; their scale is pinned to 1.
    constant: np.ndarray

    @property
    def any_constant(self) -> bool:
        return bool(np.any(self.constant))

    @classmethod
    def identity(cls, width: int) -> "ScaleState":
        return cls(means=np.zeros(width), scales=np.ones(width), constant=np.zeros(width, dtype=bool))

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.means) / self.scales


def standardize_window(window) -> tuple[np.ndarray, ScaleState]:
    """Map each column to zero mean and unit (population) variance over the window."""
    values = np.asarray(window, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if values.shape[0] < 2:
        raise DimensionError("standardization needs a window of at least 2 rows")
    means = values.mean(axis=0)
    scales = values.std(axis=0)
    constant = scales == 0.0
    if np.any(constant):
        logger.info(f"Zero-variance column(s) {np.flatnonzero(constant).tolist()} kept at scale 1")
        scales = np.where(constant, 1.0, scales)
    state = ScaleState(means=means, scales=scales, constant=constant)
    return state.apply(values), state


def destandardize(state: ScaleState, mean=None, cov=None):
    """Back to original units: mean -> s * m + mu, cov -> diag(s) cov diag(s)."""
    out_mean = None if mean is None else np.asarray(mean, dtype=float) * state.scales + state.means
    out_cov = None
    if cov is not None:
        cov = np.asarray(cov, dtype=float)
        out_cov = cov * np.outer(state.scales, state.scales)
        out_cov = 0.5 * (out_cov + out_cov.T)
    return out_mean, out_cov
