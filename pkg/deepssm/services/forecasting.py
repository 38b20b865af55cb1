"""
Sliding-window warm-start forecasting.

For every test day k a τ-long window [k-τ+1, k] is standardized and fitted by
EM, starting from the previous window's parameters and taking the previous
window's first smoothed belief as the prior. The fitted model then forecasts
day k+1:

    z⁻ = T1 z̄_k + T2 u_{k+1},   x̂ = D z⁻,   S = D (T1 P_k T1ᵀ + Q) Dᵀ + R

A forecast costs O(N_x·N_z²) once the window is fitted. The control for day
k+1 is the SMA ending at day k, so every forecast depends on data up to day
k only.
"""

import asyncio
import logging
import time
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import norm

from deepssm.errors import ConfigurationError, DimensionError, EvaluationError
from deepssm.models import BacktestRecord, EmReport, ForecastRecord, ModelConfig, PipelineConfig
from deepssm.services.em import em_fit
from deepssm.services.kalman import GaussianBelief, SmootherResult, symmetrize
from deepssm.services.market_data import FEATURES, OhlcvSeries, compute_sma
from deepssm.services.observability import span
from deepssm.services.scaling import ScaleState, destandardize, standardize_window
from deepssm.services.ssm import ModelParameters, init_parameters

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForecastResult:
    date: date
    mean: np.ndarray          # (5,) original units
    cov: np.ndarray           # (5, 5) original units²
    p_up: Optional[float] = None
    target_index: int = 1
    degenerate: bool = False

    @property
    def var_target(self) -> float:
        return float(self.cov[self.target_index, self.target_index])

    @property
    def mean_target(self) -> float:
        return float(self.mean[self.target_index])

    def to_record(self) -> ForecastRecord:
        if self.p_up is None:
            raise EvaluationError(f"forecast for {self.date} was made without a reference value, so it has no p_up")
        return ForecastRecord(
            date=self.date.isoformat(),
            mean=[float(v) for v in self.mean],
            var_target=self.var_target,
            p_up=self.p_up,
            target_index=self.target_index,
            degenerate=self.degenerate,
        )


class ProbIncrease(NamedTuple):
    p_up: float
    degenerate: bool


def prob_increase(forecast: ForecastResult, reference: float) -> ProbIncrease:
    """P(x[target] > reference) under the Gaussian forecast."""
    mean, var = forecast.mean_target, forecast.var_target
    if not var > 0.0:
        if mean == reference:
            return ProbIncrease(0.5, True)
        return ProbIncrease(1.0 if mean > reference else 0.0, True)
    p_up = float(norm.sf(reference, loc=mean, scale=np.sqrt(var)))
    return ProbIncrease(min(max(p_up, 0.0), 1.0), False)


def forecast_next(
    params: ModelParameters,
    belief: GaussianBelief,
    control,
    *,
    scale: ScaleState | None = None,
    target_index: int = 1,
    reference: float | None = None,
    day: date | None = None,
) -> ForecastResult:
    """One-step-ahead predictive mean and covariance, in original units when ``scale`` is given."""
    u = np.atleast_1d(np.asarray(control, dtype=float))
    if u.shape != (params.n_y,):
        raise DimensionError(f"control must have length {params.n_y}, got shape {u.shape}")
    if belief.mean.shape != (params.n_z,):
        raise DimensionError(f"belief mean must have length {params.n_z}")
    T1, D = params.transition, params.emission
    z_pred = T1 @ belief.mean + params.control_matrix @ u
    P_pred = T1 @ belief.cov @ T1.T + params.q_cov
    mean = D @ z_pred
    cov = symmetrize(D @ P_pred @ D.T + params.r_cov)
    if scale is not None:
        mean, cov = destandardize(scale, mean, cov)

    forecast = ForecastResult(date=day, mean=mean, cov=cov, target_index=target_index)
    if reference is None:
        return forecast
    p_up, degenerate = prob_increase(forecast, reference)
    return ForecastResult(
        date=day, mean=mean, cov=cov, p_up=p_up, target_index=target_index, degenerate=degenerate
    )


# =============================================================================
# Window fitting
# =============================================================================

@dataclass(frozen=True)
class WindowFit:
    params: ModelParameters
    smoother: SmootherResult
    report: EmReport
    obs_scale: ScaleState
    control_scale: ScaleState
    seconds: float


@dataclass(frozen=True)
class WindowSummary:
    end_date: date
    iterations: int
    converged: bool
    log_likelihood: float
    seconds: float


def _check_dimensions(config: ModelConfig) -> None:
    if config.n_x != len(FEATURES):
        raise ConfigurationError(f"n_x must be {len(FEATURES)} for OHLCV features", field="n_x")
    if config.n_y != 1:
        raise ConfigurationError("n_y must be 1 (SMA control)", field="n_y")


def _controls(series: OhlcvSeries, pipeline: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Lagged per-day controls (N, 1) and the raw SMA (N,) used for the step after day k."""
    sma = compute_sma(series.close, pipeline.sma_period)
    return sma.lagged(), sma.values


def fit_window(
    features: np.ndarray,
    controls: np.ndarray,
    end: int,
    params0: ModelParameters,
    config: ModelConfig,
    pipeline: PipelineConfig,
) -> WindowFit:
    """EM on rows [end-τ+1, end]."""
    start = end - config.window + 1
    x_raw, u_raw = features[start:end + 1], controls[start:end + 1]
    if pipeline.standardize:
        x, obs_scale = standardize_window(x_raw)
        u, control_scale = standardize_window(u_raw)
    else:
        x, obs_scale = x_raw, ScaleState.identity(x_raw.shape[1])
        u, control_scale = u_raw, ScaleState.identity(u_raw.shape[1])

    started = time.perf_counter()
    params, smoother, report = em_fit(params0, x, u, config)
    seconds = time.perf_counter() - started
    return WindowFit(params, smoother, report, obs_scale, control_scale, seconds)


def _forecast_from_fit(
    fit: WindowFit, next_control: float, pipeline: PipelineConfig, reference: float, day: date
) -> ForecastResult:
    u_next = fit.control_scale.apply(np.array([next_control]))
    return forecast_next(
        fit.params,
        fit.smoother.last,
        u_next,
        scale=fit.obs_scale,
        target_index=pipeline.target_index,
        reference=reference,
        day=day,
    )


# =============================================================================
# Backtest
# =============================================================================

@dataclass
class BacktestRun:
    asset: str
    layers: int
    forecasts: list[ForecastResult] = field(default_factory=list)
    actuals: list[np.ndarray] = field(default_factory=list)
    references: list[float] = field(default_factory=list)
    windows: list[WindowSummary] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.forecasts)

    @property
    def target_index(self) -> int:
        return self.forecasts[0].target_index if self.forecasts else 1

    def actual_target(self) -> np.ndarray:
        return np.array([a[self.target_index] for a in self.actuals])

    def labels(self) -> np.ndarray:
        """1 where the target rose from the reference day, else 0."""
        return (self.actual_target() > np.array(self.references)).astype(int)

    def records(self) -> list[BacktestRecord]:
        out = []
        for forecast, actual, label in zip(self.forecasts, self.actuals, self.labels()):
            base = forecast.to_record().model_dump()
            out.append(BacktestRecord(**base, actual=[float(v) for v in actual], label_up=int(label)))
        return out

    @property
    def total_seconds(self) -> float:
        return sum(w.seconds for w in self.windows)


def walk_forward(
    series: OhlcvSeries,
    config: ModelConfig,
    pipeline: PipelineConfig,
    split_date: date,
    asset: str = "asset",
) -> BacktestRun:
    """Refit on the trailing window and forecast one day, for every day from the split onward."""
    _check_dimensions(config)
    features = series.features()
    controls, sma = _controls(series, pipeline)
    n_rows = len(series)
    split = series.position_of(split_date)
    tau = config.window

    if split < tau - 1:
        raise ConfigurationError(
            f"split {split_date} leaves {split + 1} rows of history, window needs {tau}", field="split_date"
        )
    if split > n_rows - 2:
        raise ConfigurationError(f"split {split_date} leaves no day to forecast", field="split_date")

    run = BacktestRun(asset=asset, layers=config.layers)
    params = init_parameters(config)
    previous: WindowFit | None = None
    t = pipeline.target_index
    for k in range(split, n_rows - 1):
        if previous is not None:
            first = previous.smoother.smoothed_means[0], previous.smoother.smoothed_covs[0]
            params = previous.params.with_prior(*first)
        with span("window_fit", asset=asset, layers=config.layers, end=str(series.dates[k])):
            fit = fit_window(features, controls, k, params, config, pipeline)
        forecast = _forecast_from_fit(fit, sma[k], pipeline, features[k, t], series.dates[k + 1])

        run.forecasts.append(forecast)
        run.actuals.append(features[k + 1].copy())
        run.references.append(float(features[k, t]))
        run.windows.append(
            WindowSummary(
                end_date=series.dates[k],
                iterations=fit.report.iterations_run,
                converged=fit.report.converged,
                log_likelihood=fit.report.final_log_likelihood,
                seconds=fit.seconds,
            )
        )
        logger.debug(
            f"{asset} L{config.layers} window ending {series.dates[k]}: "
            f"{fit.report.iterations_run} iterations in {fit.seconds:.3f}s"
        )
        previous = fit

    converged = sum(w.converged for w in run.windows)
    logger.info(
        f"{asset} L{config.layers}: {len(run)} forecasts, {converged}/{len(run.windows)} windows converged, "
        f"{run.total_seconds:.1f}s fitting"
    )
    return run


def fit_latest(
    series: OhlcvSeries,
    config: ModelConfig,
    pipeline: PipelineConfig,
    params0: ModelParameters | None = None,
) -> WindowFit:
    """Fit the window ending at the last row."""
    _check_dimensions(config)
    n_rows = len(series)
    if n_rows < config.window:
        raise ConfigurationError(f"window {config.window} exceeds the {n_rows} rows available", field="window")
    controls, _ = _controls(series, pipeline)
    params = params0 if params0 is not None else init_parameters(config)
    return fit_window(series.features(), controls, n_rows - 1, params, config, pipeline)


def forecast_series(
    series: OhlcvSeries,
    config: ModelConfig,
    pipeline: PipelineConfig,
    params0: ModelParameters | None = None,
) -> tuple[ForecastResult, WindowFit]:
    """Fit the final window and forecast the day after the last row."""
    fit = fit_latest(series, config, pipeline, params0)
    features = series.features()
    _, sma = _controls(series, pipeline)
    last = len(series) - 1
    day = series.dates[last] + timedelta(days=1)
    forecast = _forecast_from_fit(fit, sma[last], pipeline, features[last, pipeline.target_index], day)
    return forecast, fit


# =============================================================================
# Concurrent backtests
# =============================================================================

@dataclass(frozen=True)
class BacktestJob:
    asset: str
    series: OhlcvSeries
    config: ModelConfig
    pipeline: PipelineConfig
    split_date: date


async def run_backtests(jobs: list[BacktestJob], max_workers: int = 4) -> list[BacktestRun]:
    """Run independent walk-forward chains concurrently; results keep the job order."""
    semaphore = asyncio.Semaphore(max_workers)

    async def run_with_limit(job: BacktestJob, index: int) -> BacktestRun:
        async with semaphore:
            logger.info(f"Backtest {index + 1}/{len(jobs)}: {job.asset} L{job.config.layers}")
            return await asyncio.to_thread(
                walk_forward, job.series, job.config, job.pipeline, job.split_date, job.asset
            )

    logger.info(f"Running {len(jobs)} backtests (max_concurrency: {max_workers})")
    results = await asyncio.gather(*[run_with_limit(job, i) for i, job in enumerate(jobs)])
    return list(results)
