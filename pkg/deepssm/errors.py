"""
Exception hierarchy for deepssm.

Every error raised by the library derives from DeepSSMError and carries the
process exit code the CLI maps it to (2 config, 3 data, 4 numeric).
"""


class DeepSSMError(Exception):
    """Base class for all library errors."""
    exit_code = 4


# =============================================================================
# Configuration (exit 2)
# =============================================================================

class ConfigurationError(DeepSSMError):
    """Invalid configuration value, or a request the data cannot satisfy."""
    exit_code = 2

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


# =============================================================================
# Data (exit 3)
# =============================================================================

class DataError(DeepSSMError):
    """Input data could not be read or violates the expected schema."""
    exit_code = 3


class SchemaError(DataError):
    """A required CSV column is missing or renamed."""

    def __init__(self, column: str):
        super().__init__(f"Missing required column: '{column}'")
        self.column = column


class RowError(DataError):
    """A CSV row holds a value that cannot be used."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CheckpointParseError(DataError):
    """A checkpoint file is not well-formed JSON."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


class CheckpointValidationError(DataError):
    """A checkpoint parses but contradicts its own config or the model invariants."""


# =============================================================================
# Numerical (exit 4)
# =============================================================================

class NumericalError(DeepSSMError):
    """Numerical failure inside inference, learning or evaluation."""
    exit_code = 4


class DimensionError(NumericalError):
    """Array shapes do not line up."""


class InferenceError(NumericalError):
    """A covariance could not be factorized, even after the jitter retry."""

    def __init__(self, step: int, what: str, iteration: int | None = None):
        self.step = step
        self.what = what
        self.iteration = iteration
        where = f"step k={step}" if iteration is None else f"EM iteration {iteration}, step k={step}"
        super().__init__(f"{what} is numerically singular at {where}")

    def at_iteration(self, iteration: int) -> "InferenceError":
        """Return a copy of this error tagged with the EM iteration index."""
        return InferenceError(self.step, self.what, iteration=iteration)


class EvaluationError(NumericalError):
    """A metric is undefined for the given inputs."""
