"""
Pydantic models for configuration and emitted records.
"""

from datetime import date
from pathlib import Path
from typing import List, Literal, NoReturn, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from deepssm.errors import ConfigurationError


# =============================================================================
# Configuration Models
# =============================================================================

class ModelConfig(BaseModel):
    """Dimensions, depth, window and noise scales of the multi-linear SSM."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_z: int = Field(default=5, ge=1)
    n_x: int = Field(default=5, ge=1)
    n_y: int = Field(default=1, ge=1)
    layers: int = 3
    window: int = Field(default=50, ge=2)
    em_iters: int = Field(default=50, ge=1)
    sigma_q: float = Field(default=1e-5, gt=0)
    sigma_r: float = Field(default=1e-1, gt=0)
    sigma_p: float = Field(default=1e-1, gt=0)
    init_scale: float = Field(default=1e-1, gt=0)
    seed: int = 0
    # ReLU projection of every factor update; disabled only for unconstrained checks.
    nonnegative: bool = True
    param_tol: float = Field(default=1e-8, gt=0)
    loglik_tol: float = Field(default=1e-9, gt=0)

    @field_validator("layers")
    @classmethod
    def _layers_in_range(cls, v: int) -> int:
        if v not in (1, 2, 3):
            raise ValueError("layers must be 1, 2 or 3")
        return v


class PipelineConfig(BaseModel):
    """Data preparation and scoring options for the forecasting pipeline."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    sma_period: int = Field(default=10, ge=1)
    # 0-based index into (open, adj_close, high, low, volume)
    target_index: int = Field(default=1, ge=0, le=4)
    standardize: bool = True
    cvi_window: int = Field(default=30, ge=2)
    symmetric_logloss: bool = False


def _raise_configuration_error(exc: ValidationError) -> NoReturn:
    fields = [".".join(str(p) for p in err["loc"]) or "<root>" for err in exc.errors()]
    messages = "; ".join(f"{f}: {err['msg']}" for f, err in zip(fields, exc.errors()))
    raise ConfigurationError(f"Invalid configuration ({messages})", field=fields[0]) from exc


def build_model_config(**overrides) -> ModelConfig:
    """Build a ModelConfig, dropping None overrides; invalid fields raise ConfigurationError."""
    try:
        return ModelConfig(**{k: v for k, v in overrides.items() if v is not None})
    except ValidationError as exc:
        _raise_configuration_error(exc)


def build_pipeline_config(**overrides) -> PipelineConfig:
    """Build a PipelineConfig, dropping None overrides; invalid fields raise ConfigurationError."""
    try:
        return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})
    except ValidationError as exc:
        _raise_configuration_error(exc)


class CliConfig(BaseModel):
    """Parsed command line for one invocation."""
    command: Literal["fit", "forecast", "backtest", "metrics", "synth", "fetch"]
    inputs: List[Path] = []
    checkpoint: Optional[Path] = None
    output: Optional[Path] = None
    split_date: Optional[date] = None
    layers: List[int] = [3]
    model: ModelConfig = ModelConfig()
    pipeline: PipelineConfig = PipelineConfig()
    asset: Optional[str] = None
    steps: int = Field(default=400, ge=2)

    @model_validator(mode="after")
    def _required_paths(self) -> "CliConfig":
        if self.command in ("fit", "forecast", "backtest", "metrics") and not self.inputs:
            raise ValueError(f"'{self.command}' needs at least one input file")
        if self.command == "fit" and self.checkpoint is None:
            raise ValueError("'fit' needs --checkpoint")
        if self.command == "backtest" and self.split_date is None:
            raise ValueError("'backtest' needs --split-date")
        if self.command in ("synth", "fetch") and self.output is None:
            raise ValueError(f"'{self.command}' needs --out")
        if self.command == "fetch" and not self.asset:
            raise ValueError("'fetch' needs --asset")
        for depth in self.layers:
            if depth not in (1, 2, 3):
                raise ValueError("layers must be 1, 2 or 3")
        return self


def build_cli_config(**fields) -> CliConfig:
    try:
        return CliConfig(**fields)
    except ValidationError as exc:
        _raise_configuration_error(exc)


# =============================================================================
# Record Models (line-delimited output)
# =============================================================================

class ForecastRecord(BaseModel):
    """One-step-ahead forecast in original units."""
    date: str
    mean: List[float]
    var_target: float
    p_up: float = Field(ge=0.0, le=1.0)
    target_index: int = 1
    # Zero predictive variance on the target; p_up is then 0, 0.5 or 1.
    degenerate: bool = False


class BacktestRecord(ForecastRecord):
    """Forecast paired with the realized observation."""
    actual: List[float]
    label_up: int = Field(ge=0, le=1)


class MetricsReport(BaseModel):
    """Point-forecast and probability-forecast scores over a test span."""
    rmse: float
    mape_pct: float = Field(ge=0.0)
    smape_pct: float = Field(ge=0.0)
    pearson_r: float = Field(ge=-1.0, le=1.0)
    t_stat: float
    t_pvalue: float
    # Reported alongside the statistic; never used to gate anything.
    significant_95: bool
    n: int = Field(ge=2)
    mape_skipped: int = 0
    log_loss: Optional[float] = None


class VolatilityReport(BaseModel):
    """Annualized root-mean-square price deviation over a trailing window."""
    cvi: float = Field(ge=0.0)
    window_days: int
    anchor: str = "final_close"


class SummaryRow(BaseModel):
    """One asset/depth row of the backtest summary."""
    asset: str
    layers: int
    metrics: MetricsReport
    volatility: VolatilityReport


class EmReport(BaseModel):
    """Per-fit EM diagnostics; ``trace[i]`` is the log-likelihood entering iteration i+1."""
    trace: List[float]
    iterations_run: int = Field(ge=0)
    converged: bool
    final_param_change: float
    final_log_likelihood: float
    # 1-based iterations whose sweep clamped at least one negative entry.
    clamped_iterations: List[int] = []
    # Max abs factor-entry change after each iteration.
    param_changes: List[float] = []

    @model_validator(mode="after")
    def _trace_matches_iterations(self) -> "EmReport":
        if len(self.trace) != self.iterations_run:
            raise ValueError(f"trace has {len(self.trace)} entries for {self.iterations_run} iterations")
        return self
