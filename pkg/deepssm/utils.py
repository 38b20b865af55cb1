"""
Shared utility functions.
"""

import json
from pathlib import Path
from typing import Iterable, Type, TypeVar

from pydantic import BaseModel

from deepssm.models import MetricsReport, SummaryRow, VolatilityReport

T = TypeVar("T", bound=BaseModel)


def to_dict(obj):
    """Convert Pydantic model to dict, or return as-is if already a dict."""
    return obj.model_dump() if hasattr(obj, "model_dump") else obj


def write_jsonl(path: str | Path, records: Iterable) -> Path:
    """Write one compact JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(to_dict(record), separators=(",", ":")) + "\n")
    return path


def read_jsonl(path: str | Path, model: Type[T]) -> list[T]:
    """Parse a JSONL file into pydantic records, skipping blank lines."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [model.model_validate_json(line) for line in lines if line.strip()]


def forecasts_file_name(asset: str, layers: int) -> str:
    return f"{asset}-L{layers}.forecasts.jsonl"


def build_summary_row(asset: str, layers: int, metrics: MetricsReport, volatility: VolatilityReport) -> SummaryRow:
    return SummaryRow(asset=asset, layers=layers, metrics=metrics, volatility=volatility)


def format_summary_table(rows: list[SummaryRow]) -> str:
    """Fixed-width comparison table, one line per asset and depth."""
    header = f"{'asset':<12} {'L':>2} {'RMSE':>12} {'MAPE%':>8} {'SMAPE%':>8} {'r':>7} {'t':>8} {'logloss':>8} {'CVI':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        m = row.metrics
        loss = "-" if m.log_loss is None else f"{m.log_loss:.4f}"
        lines.append(
            f"{row.asset:<12} {row.layers:>2} {m.rmse:>12.4f} {m.mape_pct:>8.2f} {m.smape_pct:>8.2f} "
            f"{m.pearson_r:>7.3f} {m.t_stat:>8.3f} {loss:>8} {row.volatility.cvi:>10.2f}"
        )
    return "\n".join(lines)


def data_file(filename: str) -> Path:
    """Locate a bundled data file (package data directory first, then ./data)."""
    roots = [
        Path(__file__).parent / "data",
        Path("data"),
    ]
    for root in roots:
        candidate = root / filename
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"Could not find data file: {filename}")
