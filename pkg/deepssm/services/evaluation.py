"""
Forecast scoring: point-error metrics, Pearson r, Welch t-test, log-loss and
the annualized volatility index (CVI).
"""

import logging

import numpy as np
from scipy import stats

from deepssm.errors import ConfigurationError, DataError, DimensionError, EvaluationError
from deepssm.models import BacktestRecord, MetricsReport, VolatilityReport

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DAYS_PER_YEAR = 365
SIGNIFICANCE = 0.05


def _paired(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.shape != a.shape:
        raise DimensionError(f"pred has {p.size} values but actual has {a.size}")
    if p.size < 2:
        raise EvaluationError("metrics need at least 2 samples")
    return p, a


def pearson_r(pred, actual) -> float:
    p, a = _paired(pred, actual)
    if np.std(p) == 0.0 or np.std(a) == 0.0:
        raise EvaluationError("Pearson r is undefined for a zero-variance series")
    r = np.corrcoef(p, a)[0, 1]
    return float(np.clip(r, -1.0, 1.0))


def welch_t(pred, actual) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value."""
    p, a = _paired(pred, actual)
    if np.array_equal(p, a):
        return 0.0, 1.0
    result = stats.ttest_ind(p, a, equal_var=False)
    return float(result.statistic), float(result.pvalue)


def metrics(pred, actual, probs=None, labels=None, symmetric_logloss: bool = False) -> MetricsReport:
    p, a = _paired(pred, actual)
    error = p - a

    rmse = float(np.sqrt(np.mean(error ** 2)))

    nonzero = a != 0.0
    mape_skipped = int(np.count_nonzero(~nonzero))
    if mape_skipped:
        logger.warning(f"MAPE skips {mape_skipped} zero actual(s)")
    mape = float(100.0 * np.mean(np.abs(error[nonzero]) / np.abs(a[nonzero]))) if nonzero.any() else 0.0

    denom = np.abs(a) + np.abs(p)
    smape_terms = np.divide(2.0 * np.abs(error), denom, out=np.zeros_like(error), where=denom > 0)
    smape = float(100.0 * np.mean(smape_terms))

    t_stat, t_pvalue = welch_t(p, a)
    loss = None
    if probs is not None and labels is not None:
        loss = log_loss(labels, probs, symmetric=symmetric_logloss)
    return MetricsReport(
        rmse=rmse,
        mape_pct=mape,
        smape_pct=smape,
        pearson_r=pearson_r(p, a),
        t_stat=t_stat,
        t_pvalue=t_pvalue,
        significant_95=bool(t_pvalue < SIGNIFICANCE),
        n=int(p.size),
        mape_skipped=mape_skipped,
        log_loss=loss,
    )


def log_loss(labels, probs, symmetric: bool = False) -> float:
    """
    Mean cross-entropy of probability-of-increase scores.

    The default one-sided form only penalizes missed increases:
    (1/K) Σ −L_k log p_k. ``symmetric=True`` adds −(1−L_k) log(1−p_k).
    """
    y = np.asarray(labels, dtype=float).ravel()
    q = np.asarray(probs, dtype=float).ravel()
    if y.shape != q.shape:
        raise DimensionError(f"{y.size} labels but {q.size} probabilities")
    if y.size < 1:
        raise EvaluationError("log-loss needs at least one sample")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("labels must be 0 or 1")
    if not np.all(np.isfinite(q)):
        raise DataError("probabilities must be finite")
    q = np.clip(q, PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = -y * np.log(q)
    if symmetric:
        loss -= (1.0 - y) * np.log(1.0 - q)
    return float(np.mean(loss))


def cvi(close, window_days: int = 30) -> VolatilityReport:
    """sqrt(365) * RMS deviation of the trailing closes from the final close."""
    prices = np.asarray(close, dtype=float).ravel()
    if window_days < 2:
        raise ConfigurationError("CVI window must be at least 2 days", field="cvi_window")
    if window_days > prices.size:
        raise ConfigurationError(
            f"CVI window {window_days} exceeds the {prices.size} closes available", field="cvi_window"
        )
    trailing = prices[-window_days:]
    deviation = trailing[-1] - trailing
    value = float(np.sqrt(DAYS_PER_YEAR) * np.sqrt(np.mean(deviation ** 2)))
    return VolatilityReport(cvi=value, window_days=window_days)


def score_records(records: list[BacktestRecord], symmetric_logloss: bool = False) -> MetricsReport:
    """Metrics of a backtest, computed from its emitted records alone."""
    if not records:
        raise EvaluationError("no backtest records to score")
    pred = [r.mean[r.target_index] for r in records]
    actual = [r.actual[r.target_index] for r in records]
    return metrics(
        pred,
        actual,
        probs=[r.p_up for r in records],
        labels=[r.label_up for r in records],
        symmetric_logloss=symmetric_logloss,
    )
