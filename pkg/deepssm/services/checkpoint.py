"""
Checkpoint (de)serialization.

A checkpoint is one JSON document with keys ``config``, ``state_stack``,
``control_stack``, ``obs_stack`` and ``noise``. Every matrix is stored
row-major with explicit ``rows``/``cols``. Floats are written with their
shortest round-trip representation, so a save/load cycle is lossless.
"""

import json
import logging
from pathlib import Path
from typing import List

import numpy as np
from pydantic import BaseModel, ValidationError, model_validator

from deepssm.errors import CheckpointParseError, CheckpointValidationError
from deepssm.models import ModelConfig
from deepssm.services.ssm import ModelParameters, Role, build_stack, factor_shapes

logger = logging.getLogger(__name__)


class MatrixPayload(BaseModel):
    rows: int
    cols: int
    data: List[float]

    @model_validator(mode="after")
    def _size_matches(self) -> "MatrixPayload":
        if self.rows * self.cols != len(self.data):
            raise ValueError(f"{self.rows}x{self.cols} matrix carries {len(self.data)} entries")
        return self

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "MatrixPayload":
        arr = np.atleast_2d(arr)
        return cls(rows=arr.shape[0], cols=arr.shape[1], data=[float(v) for v in arr.ravel(order="C")])

    def to_array(self) -> np.ndarray:
        return np.array(self.data, dtype=float).reshape(self.rows, self.cols)


class StackPayload(BaseModel):
    role: Role
    learnable: int
    factors: List[MatrixPayload]


class NoisePayload(BaseModel):
    q_cov: MatrixPayload
    r_cov: MatrixPayload
    p0_cov: MatrixPayload
    z0_mean: List[float]


class CheckpointPayload(BaseModel):
    config: ModelConfig
    state_stack: StackPayload
    control_stack: StackPayload
    obs_stack: StackPayload
    noise: NoisePayload


def _stack_payload(params: ModelParameters, role: Role) -> StackPayload:
    stack = params.stack(role)
    return StackPayload(
        role=role,
        learnable=stack.learnable,
        factors=[MatrixPayload.from_array(f) for f in stack.factors],
    )


def to_payload(params: ModelParameters, config: ModelConfig) -> CheckpointPayload:
    return CheckpointPayload(
        config=config,
        state_stack=_stack_payload(params, Role.STATE),
        control_stack=_stack_payload(params, Role.CONTROL),
        obs_stack=_stack_payload(params, Role.OBSERVATION),
        noise=NoisePayload(
            q_cov=MatrixPayload.from_array(params.q_cov),
            r_cov=MatrixPayload.from_array(params.r_cov),
            p0_cov=MatrixPayload.from_array(params.p0_cov),
            z0_mean=[float(v) for v in params.z0_mean],
        ),
    )


def dumps_checkpoint(params: ModelParameters, config: ModelConfig) -> str:
    return to_payload(params, config).model_dump_json(indent=2) + "\n"


def save_checkpoint(params: ModelParameters, config: ModelConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_checkpoint(params, config), encoding="utf-8")
    logger.info(f"Checkpoint written: {path}")


def _validated_stack(payload: StackPayload, role: Role, config: ModelConfig):
    if payload.role is not role:
        raise CheckpointValidationError(f"{role.value}_stack declares role '{payload.role.value}'")
    expected = factor_shapes(role, config.n_z, config.n_x, config.n_y)
    if len(payload.factors) != len(expected):
        raise CheckpointValidationError(
            f"{role.value}_stack has {len(payload.factors)} factors, expected {len(expected)}"
        )
    if payload.learnable != config.layers:
        raise CheckpointValidationError(
            f"{role.value}_stack learns {payload.learnable} factors but config.layers={config.layers}"
        )
    factors = []
    for index, (matrix, shape) in enumerate(zip(payload.factors, expected)):
        arr = matrix.to_array()
        if arr.shape != shape:
            raise CheckpointValidationError(
                f"{role.value}_stack factor {index} is {arr.shape[0]}x{arr.shape[1]}, "
                f"config implies {shape[0]}x{shape[1]}"
            )
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise CheckpointValidationError(f"{role.value}_stack factor {index} has a negative or non-finite entry")
        factors.append(arr)
    return build_stack(role, factors, payload.learnable)


def from_payload(payload: CheckpointPayload) -> tuple[ModelParameters, ModelConfig]:
    config = payload.config
    noise = payload.noise
    params = ModelParameters(
        state_stack=_validated_stack(payload.state_stack, Role.STATE, config),
        control_stack=_validated_stack(payload.control_stack, Role.CONTROL, config),
        obs_stack=_validated_stack(payload.obs_stack, Role.OBSERVATION, config),
        q_cov=noise.q_cov.to_array(),
        r_cov=noise.r_cov.to_array(),
        z0_mean=np.array(noise.z0_mean, dtype=float),
        p0_cov=noise.p0_cov.to_array(),
    )
    for name, size in (("q_cov", config.n_z), ("r_cov", config.n_x), ("p0_cov", config.n_z)):
        if getattr(params, name).shape != (size, size):
            raise CheckpointValidationError(f"noise.{name} must be {size}x{size}")
    if params.z0_mean.shape != (config.n_z,):
        raise CheckpointValidationError(f"noise.z0_mean must have length {config.n_z}")
    problems = params.covariance_problems()
    if problems:
        raise CheckpointValidationError(f"not symmetric positive definite / finite: {', '.join(problems)}")
    return params, config


def loads_checkpoint(text: str) -> tuple[ModelParameters, ModelConfig]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CheckpointParseError(offset, exc.msg) from exc
    try:
        payload = CheckpointPayload.model_validate(raw)
    except ValidationError as exc:
        raise CheckpointValidationError(f"checkpoint does not match the schema: {exc}") from exc
    return from_payload(payload)


def load_checkpoint(path: str | Path) -> tuple[ModelParameters, ModelConfig]:
    path = Path(path)
    data = path.read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointParseError(exc.start, "not UTF-8 text") from exc
    params, config = loads_checkpoint(text)
    logger.info(f"Checkpoint loaded: {path} (layers={config.layers}, n_z={config.n_z})")
    return params, config
