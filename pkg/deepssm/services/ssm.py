"""
Multi-linear Gaussian state-space model: parameterization and initialization.

    z_k = (T10 T11 T12) z_{k-1} + (T20 T21 T22) u_k + v1_k,   v1_k ~ N(0, Q)
    x_k = (D0 D1 D2) z_k + v2_k,                               v2_k ~ N(0, R)

Every operator is a stack of three nonnegative factors. A model of depth
``layers`` < 3 learns only the leading ``layers`` factors of each stack; the
trailing ones stay fixed at identity so all code paths see three factors.
"""

import enum
import logging
from dataclasses import dataclass, replace
from functools import reduce
from typing import Sequence

import numpy as np

from deepssm.errors import DimensionError
from deepssm.models import ModelConfig

logger = logging.getLogger(__name__)

STACK_DEPTH = 3


class Role(str, enum.Enum):
    STATE = "state"
    CONTROL = "control"
    OBSERVATION = "observation"


class FactorPosition(enum.Enum):
    """The nine factor slots, in the order one M-step sweep visits them."""
    T10 = (Role.STATE, 0)
    T11 = (Role.STATE, 1)
    T12 = (Role.STATE, 2)
    T20 = (Role.CONTROL, 0)
    T21 = (Role.CONTROL, 1)
    T22 = (Role.CONTROL, 2)
    D0 = (Role.OBSERVATION, 0)
    D1 = (Role.OBSERVATION, 1)
    D2 = (Role.OBSERVATION, 2)

    @property
    def role(self) -> Role:
        return self.value[0]

    @property
    def index(self) -> int:
        return self.value[1]


def factor_shapes(role: Role, n_z: int, n_x: int, n_y: int) -> list[tuple[int, int]]:
    """Shapes of the three factors of a stack."""
    if role is Role.STATE:
        return [(n_z, n_z)] * 3
    if role is Role.CONTROL:
        return [(n_z, n_z), (n_z, n_z), (n_z, n_y)]
    return [(n_x, n_z), (n_z, n_z), (n_z, n_z)]


def compose(stack: "FactorStack | Sequence[np.ndarray]") -> np.ndarray:
    """Left-to-right matrix product of the factors."""
    factors = stack.factors if isinstance(stack, FactorStack) else tuple(stack)
    if not factors:
        raise DimensionError("cannot compose an empty factor list")
    for left, right in zip(factors, factors[1:]):
        if left.ndim != 2 or right.ndim != 2 or left.shape[1] != right.shape[0]:
            raise DimensionError(f"factor shapes {left.shape} and {right.shape} do not chain")
    return reduce(np.matmul, factors)


@dataclass(frozen=True)
class FactorStack:
    """Ordered nonnegative factors whose product forms one operator."""
    role: Role
    factors: tuple[np.ndarray, ...]
    # Number of leading factors that are learned; the rest are fixed identities.
    learnable: int = STACK_DEPTH

    def __post_init__(self):
        frozen = []
        for f in self.factors:
            arr = np.array(f, dtype=float)
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "factors", tuple(frozen))
        compose(self.factors)

    @property
    def matrix(self) -> np.ndarray:
        return compose(self.factors)

    def is_learnable(self, index: int) -> bool:
        return index < self.learnable

    def is_nonnegative(self) -> bool:
        return all(bool(np.all(f >= 0)) for f in self.factors)

    def with_factor(self, index: int, value: np.ndarray) -> "FactorStack":
        if value.shape != self.factors[index].shape:
            raise DimensionError(
                f"{self.role.value} factor {index} expects {self.factors[index].shape}, got {value.shape}"
            )
        factors = list(self.factors)
        factors[index] = value
        return replace(self, factors=tuple(factors))

    def balanced(self) -> "FactorStack":
        """
        Same operator with every learnable factor but the last scaled to unit columns.

        X_i diag(c) and diag(1/c) X_{i+1} compose to the same product, so each
        column norm of X_i is moved onto the matching row of X_{i+1}. Zero
        columns are left alone. Positive scaling keeps the factors nonnegative.
        """
        factors = list(self.factors)
        for i in range(self.learnable - 1):
            norms = np.linalg.norm(factors[i], axis=0)
            scale = np.where(norms > 0.0, norms, 1.0)
            factors[i] = factors[i] / scale
            factors[i + 1] = scale[:, None] * factors[i + 1]
        return replace(self, factors=tuple(factors))


@dataclass(frozen=True)
class ModelParameters:
    """Factor stacks, fixed noise covariances and the initial-state prior."""
    state_stack: FactorStack
    control_stack: FactorStack
    obs_stack: FactorStack
    q_cov: np.ndarray
    r_cov: np.ndarray
    z0_mean: np.ndarray
    p0_cov: np.ndarray

    @property
    def transition(self) -> np.ndarray:
        """T1 = T10 T11 T12."""
        return self.state_stack.matrix

    @property
    def control_matrix(self) -> np.ndarray:
        """T2 = T20 T21 T22."""
        return self.control_stack.matrix

    @property
    def emission(self) -> np.ndarray:
        """D = D0 D1 D2."""
        return self.obs_stack.matrix

    @property
    def n_z(self) -> int:
        return self.q_cov.shape[0]

    @property
    def n_x(self) -> int:
        return self.r_cov.shape[0]

    @property
    def n_y(self) -> int:
        return self.control_stack.factors[-1].shape[1]

    def stack(self, role: Role) -> FactorStack:
        return {
            Role.STATE: self.state_stack,
            Role.CONTROL: self.control_stack,
            Role.OBSERVATION: self.obs_stack,
        }[role]

    def factor(self, position: FactorPosition) -> np.ndarray:
        return self.stack(position.role).factors[position.index]

    def with_factor(self, position: FactorPosition, value: np.ndarray) -> "ModelParameters":
        updated = self.stack(position.role).with_factor(position.index, value)
        field = {
            Role.STATE: "state_stack",
            Role.CONTROL: "control_stack",
            Role.OBSERVATION: "obs_stack",
        }[position.role]
        return replace(self, **{field: updated})

    def with_prior(self, z0_mean: np.ndarray, p0_cov: np.ndarray) -> "ModelParameters":
        return replace(self, z0_mean=np.array(z0_mean, dtype=float), p0_cov=np.array(p0_cov, dtype=float))

    def balanced(self) -> "ModelParameters":
        """Pins the diagonal scale freedom inside every stack; composites are unchanged."""
        return replace(
            self,
            state_stack=self.state_stack.balanced(),
            control_stack=self.control_stack.balanced(),
            obs_stack=self.obs_stack.balanced(),
        )

    def learnable_positions(self) -> list[FactorPosition]:
        return [p for p in FactorPosition if self.stack(p.role).is_learnable(p.index)]

    def max_abs_delta(self, other: "ModelParameters") -> float:
        """Largest absolute entry change over all nine factors."""
        return max(
            float(np.max(np.abs(self.factor(p) - other.factor(p)))) for p in FactorPosition
        )

    def covariance_problems(self) -> list[str]:
        """Names of q_cov/r_cov/p0_cov that are not symmetric positive definite."""
        problems = []
        for name in ("q_cov", "r_cov", "p0_cov"):
            if not is_spd(getattr(self, name)):
                problems.append(name)
        if not np.all(np.isfinite(self.z0_mean)):
            problems.append("z0_mean")
        return problems


def is_spd(matrix: np.ndarray) -> bool:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.max(np.abs(matrix))))):
        return False
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


def identity_factor(shape: tuple[int, int]) -> np.ndarray:
    """Identity, rectangular when the slot is N_z x N_y."""
    return np.eye(*shape)


def build_stack(role: Role, factors: Sequence[np.ndarray], layers: int) -> FactorStack:
    return FactorStack(role=role, factors=tuple(factors), learnable=layers)


def init_parameters(config: ModelConfig) -> ModelParameters:
    """Draw every learnable factor i.i.d. uniform on [0, init_scale]; fixed factors are identity."""
    rng = np.random.default_rng(config.seed)
    stacks = {}
    for role in Role:
        factors = []
        for index, shape in enumerate(factor_shapes(role, config.n_z, config.n_x, config.n_y)):
            if index < config.layers:
                factors.append(rng.uniform(0.0, config.init_scale, size=shape))
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
    logger.debug(
        f"Initialized {config.layers}-layer parameters (n_z={config.n_z}, n_x={config.n_x}, "
        f"n_y={config.n_y}, seed={config.seed})"
    )
    return params
