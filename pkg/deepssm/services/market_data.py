"""
OHLCV ingestion and the SMA control input.

Input is the Yahoo Finance daily CSV: ``Date,Open,High,Low,Close,Adj Close,Volume``
with ISO dates and the literal ``null`` for missing fields.
"""

import io
import logging
import os
from dataclasses import dataclass, replace
from datetime import date, datetime, time, timezone

import numpy as np
import pandas as pd
import requests

from deepssm.errors import ConfigurationError, DataError, RowError, SchemaError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("Date", "Open", "High", "Low", "Close", "Adj Close", "Volume")
NUMERIC_COLUMNS = REQUIRED_COLUMNS[1:]
# Observation vector order.
FEATURES = ("open", "adj_close", "high", "low", "volume")
MISSING = "null"

DEFAULT_DATA_URL = (
    "https://query1.finance.yahoo.com/v7/finance/download/{ticker}"
    "?period1={start}&period2={end}&interval=1d&events=history&includeAdjustedClose=true"
)
FETCH_TIMEOUT = 30


@dataclass(frozen=True)
class OhlcvSeries:
    dates: tuple[date, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray
    dropped_rows: int = 0

    def __len__(self) -> int:
        return len(self.dates)

    def features(self) -> np.ndarray:
        """(N, 5) observation matrix in FEATURES order."""
        return np.column_stack([getattr(self, name) for name in FEATURES])

    def head(self, n: int) -> "OhlcvSeries":
        """First n rows, as if the file ended there."""
        return replace(
            self,
            dates=self.dates[:n],
            **{name: getattr(self, name)[:n] for name in ("open", "high", "low", "close", "adj_close", "volume")},
        )

    def position_of(self, day: date) -> int:
        """Index of the first row dated on or after ``day``."""
        for index, d in enumerate(self.dates):
            if d >= day:
                return index
        return len(self.dates)


def _row_error(frame: pd.DataFrame, mask: pd.Series, message: str) -> RowError:
    # +2: one for the header, one for 1-based numbering.
    line = int(frame.index[mask.to_numpy()][0]) + 2
    return RowError(line, message)


def parse_ohlcv_csv(data: bytes | str) -> OhlcvSeries:
    try:
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    except UnicodeDecodeError as exc:
        raise DataError(f"CSV is not UTF-8 text (byte {exc.start})") from exc
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise DataError("CSV is empty") from exc
    except pd.errors.ParserError as exc:
        raise DataError(f"CSV is malformed: {exc}") from exc

    frame.columns = [str(c).strip() for c in frame.columns]
    for column in REQUIRED_COLUMNS:
        if column not in frame.columns:
            raise SchemaError(column)
    frame = frame[list(REQUIRED_COLUMNS)].apply(lambda col: col.str.strip())

    missing = (frame == MISSING).any(axis=1)
    dropped = int(missing.sum())
    if dropped:
        logger.warning(f"Dropped {dropped} row(s) with null fields")
    frame = frame[~missing]

    empty = (frame == "").any(axis=1)
    if empty.any():
        raise _row_error(frame, empty, "empty field")

    values = {}
    for column in NUMERIC_COLUMNS:
        parsed = pd.to_numeric(frame[column], errors="coerce")
        bad = parsed.isna() | ~np.isfinite(parsed.fillna(0.0))
        if bad.any():
            raise _row_error(frame, bad, f"cannot parse {column} value")
        values[column] = parsed.to_numpy(dtype=float)

    parsed_dates = pd.to_datetime(frame["Date"], format="%Y-%m-%d", errors="coerce")
    if parsed_dates.isna().any():
        raise _row_error(frame, parsed_dates.isna(), "date is not YYYY-MM-DD")
    not_increasing = parsed_dates.diff() <= pd.Timedelta(0)
    if not_increasing.any():
        raise _row_error(frame, not_increasing, "dates are not strictly increasing")

    prices = frame[["Open", "High", "Low", "Close", "Adj Close"]].apply(pd.to_numeric)
    non_positive = (prices <= 0).any(axis=1)
    if non_positive.any():
        raise _row_error(frame, non_positive, "price must be positive")
    negative_volume = pd.Series(values["Volume"] < 0, index=frame.index)
    if negative_volume.any():
        raise _row_error(frame, negative_volume, "volume must be non-negative")

    if frame.empty:
        raise DataError("CSV has no usable rows")

    return OhlcvSeries(
        dates=tuple(d.date() for d in parsed_dates),
        open=values["Open"],
        high=values["High"],
        low=values["Low"],
        close=values["Close"],
        adj_close=values["Adj Close"],
        volume=values["Volume"],
        dropped_rows=dropped,
    )


def read_ohlcv_csv(path) -> OhlcvSeries:
    with open(path, "rb") as handle:
        series = parse_ohlcv_csv(handle.read())
    logger.info(f"Loaded {len(series)} rows from {path} ({series.dates[0]} .. {series.dates[-1]})")
    return series


# =============================================================================
# Control input
# =============================================================================

@dataclass(frozen=True)
class ControlSeries:
    values: np.ndarray
    period: int

    def __len__(self) -> int:
        return len(self.values)

    def lagged(self) -> np.ndarray:
        """(N, 1) controls where day k sees the SMA ending at day k-1; day 0 uses its own."""
        shifted = np.concatenate([self.values[:1], self.values[:-1]])
        return shifted.reshape(-1, 1)


def compute_sma(close, n: int) -> ControlSeries:
    """Trailing mean of the last min(k+1, n) closes."""
    if n < 1:
        raise ConfigurationError("SMA period must be at least 1", field="sma_period")
    closes = pd.Series(np.asarray(close, dtype=float))
    if closes.empty:
        raise DataError("cannot compute an SMA of an empty series")
    values = closes.rolling(window=n, min_periods=1).mean().to_numpy()
    return ControlSeries(values=values, period=n)


# =============================================================================
# Remote fetch
# =============================================================================

def _epoch(day: date) -> int:
    return int(datetime.combine(day, time.min, tzinfo=timezone.utc).timestamp())


def fetch_ohlcv(ticker: str, start: date, end: date, url_template: str | None = None) -> bytes:
    """Download a daily OHLCV CSV; the endpoint comes from DEEPSSM_DATA_URL when set."""
    template = url_template or os.getenv("DEEPSSM_DATA_URL", DEFAULT_DATA_URL)
    url = template.format(ticker=ticker, start=_epoch(start), end=_epoch(end))
    logger.info(f"Fetching {ticker} {start}..{end}")
    try:
        response = requests.get(url, timeout=FETCH_TIMEOUT, headers={"User-Agent": "deepssm"})
    except requests.exceptions.ConnectionError as exc:
        raise DataError(f"Cannot connect to {url}") from exc
    except requests.exceptions.Timeout as exc:
        raise DataError(f"Request to {url} timed out") from exc
    if not response.ok:
        raise DataError(f"Fetching {ticker} failed with HTTP {response.status_code}")
    # Validate before handing the bytes back.
    parse_ohlcv_csv(response.content)
    return response.content
