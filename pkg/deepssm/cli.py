"""
deepssm command line.

Usage:
    uv run python -m deepssm fit deepssm/data/BTC-USD.csv --checkpoint out/btc.json
    uv run python -m deepssm forecast deepssm/data/BTC-USD.csv
    uv run python -m deepssm backtest deepssm/data/BTC-USD.csv --split-date 2018-05-01 --layers 1 2 3 --out results
    uv run python -m deepssm metrics results/BTC-USD-L3.forecasts.jsonl
    uv run python -m deepssm synth --out out/synth.csv --steps 400 --seed 7
    uv run python -m deepssm fetch --asset bitcoin --out data/BTC-USD.csv

Exit codes: 0 success, 2 configuration, 3 data, 4 numerical.
"""

import argparse
import asyncio
import json
import logging
import os
import sys
from datetime import date
from pathlib import Path

from dotenv import load_dotenv

from config import asset_for_path, get_asset
from deepssm.errors import ConfigurationError, DeepSSMError
from deepssm.models import BacktestRecord, CliConfig, build_cli_config, build_model_config, build_pipeline_config
from deepssm.services.checkpoint import load_checkpoint, save_checkpoint
from deepssm.services.evaluation import cvi, score_records
from deepssm.services.forecasting import BacktestJob, fit_latest, forecast_series, run_backtests
from deepssm.services.market_data import fetch_ohlcv, read_ohlcv_csv
from deepssm.services.observability import configure_logfire, span
from deepssm.services.synth import synthesize, write_synthetic_csv
from deepssm.utils import build_summary_row, forecasts_file_name, format_summary_table, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DATA = 3
EXIT_NUMERIC = 4
DEFAULT_MAX_WORKERS = 4


# =============================================================================
# Argument parsing
# =============================================================================

def _model_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("model")
    group.add_argument("--tau", type=int, help="training window length (default 50)")
    group.add_argument("--layers", type=int, nargs="+", help="factor depth(s) in {1,2,3} (default 3)")
    group.add_argument("--em-iters", type=int, help="maximum EM iterations (default 50)")
    group.add_argument("--seed", type=int, help="random seed (default 0)")
    group.add_argument("--sigma-q", type=float, help="state noise scale (default 1e-5)")
    group.add_argument("--sigma-r", type=float, help="observation noise scale (default 1e-1)")
    group.add_argument("--sigma-p", type=float, help="prior scale (default 1e-1)")
    group.add_argument("--n-z", type=int, help="latent dimension (default 5)")

    group = parent.add_argument_group("pipeline")
    group.add_argument("--sma-period", type=int, help="SMA control period in days (default 10)")
    group.add_argument("--target-index", type=int, help="scored feature: 0 open, 1 adj close, 2 high, 3 low, 4 volume")
    group.add_argument("--no-standardize", action="store_true", help="fit on raw units")
    group.add_argument("--symmetric-logloss", action="store_true", help="penalize missed decreases too")
    group.add_argument("--cvi-window", type=int, help="CVI trailing window in days (default 30)")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepssm", description="Deep multi-linear state-space forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _model_flags()

    p = sub.add_parser("fit", parents=[common], help="fit the final window and write a checkpoint")
    p.add_argument("inputs", nargs=1, type=Path, metavar="CSV")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file to write")

    p = sub.add_parser("forecast", parents=[common], help="forecast the day after the last row")
    p.add_argument("inputs", nargs=1, type=Path, metavar="CSV")
    p.add_argument("--checkpoint", type=Path, help="warm-start parameters")
    p.add_argument("--out", type=Path, help="JSONL file for the forecast record")

    p = sub.add_parser("backtest", parents=[common], help="walk-forward backtest from a split date")
    p.add_argument("inputs", nargs="+", type=Path, metavar="CSV")
    p.add_argument(
        "--split-date", type=date.fromisoformat,
        help="end of the first training window, YYYY-MM-DD; forecasts start the day after",
    )
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory (default results/)")

    p = sub.add_parser("metrics", parents=[common], help="score backtest forecast files")
    p.add_argument("inputs", nargs="+", type=Path, metavar="JSONL")
    p.add_argument("--out", type=Path, help="JSONL file for the metrics records")

    p = sub.add_parser("synth", parents=[common], help="simulate an OHLCV-shaped CSV and its ground truth")
    p.add_argument("--out", type=Path, help="CSV file to write")
    p.add_argument("--checkpoint", type=Path, help="ground-truth checkpoint (default <out>.truth.json)")
    p.add_argument("--steps", type=int, default=400, help="number of days (default 400)")

    p = sub.add_parser("fetch", help="download daily OHLCV for a registered asset")
    p.add_argument("--asset", help="registry key or ticker, e.g. bitcoin or BTC-USD")
    p.add_argument("--out", type=Path, help="CSV file to write")
    return parser


def parse_cli(argv: list[str] | None = None) -> CliConfig:
    args = build_parser().parse_args(argv)
    layers = getattr(args, "layers", None) or [3]
    model = build_model_config(
        window=getattr(args, "tau", None),
        layers=layers[0] if layers[0] in (1, 2, 3) else None,
        em_iters=getattr(args, "em_iters", None),
        seed=getattr(args, "seed", None),
        sigma_q=getattr(args, "sigma_q", None),
        sigma_r=getattr(args, "sigma_r", None),
        sigma_p=getattr(args, "sigma_p", None),
        n_z=getattr(args, "n_z", None),
    )
    pipeline = build_pipeline_config(
        sma_period=getattr(args, "sma_period", None),
        target_index=getattr(args, "target_index", None),
        standardize=False if getattr(args, "no_standardize", False) else None,
        symmetric_logloss=True if getattr(args, "symmetric_logloss", False) else None,
        cvi_window=getattr(args, "cvi_window", None),
    )
    return build_cli_config(
        command=args.command,
        inputs=getattr(args, "inputs", []),
        checkpoint=getattr(args, "checkpoint", None),
        output=getattr(args, "out", None),
        split_date=getattr(args, "split_date", None),
        layers=layers,
        model=model,
        pipeline=pipeline,
        asset=getattr(args, "asset", None),
        steps=getattr(args, "steps", 400),
    )


# =============================================================================
# Commands
# =============================================================================

def cmd_fit(cfg: CliConfig) -> int:
    series = read_ohlcv_csv(cfg.inputs[0])
    fit = fit_latest(series, cfg.model, cfg.pipeline)
    save_checkpoint(fit.params, cfg.model, cfg.checkpoint)
    report = fit.report
    print(
        f"EM: {report.iterations_run} iterations, converged={report.converged}, "
        f"final log-likelihood {report.final_log_likelihood:.6f}"
    )
    print(f"Checkpoint: {cfg.checkpoint}")
    return EXIT_OK


def cmd_forecast(cfg: CliConfig) -> int:
    series = read_ohlcv_csv(cfg.inputs[0])
    model, params0 = cfg.model, None
    if cfg.checkpoint is not None:
        params0, model = load_checkpoint(cfg.checkpoint)
    forecast, _ = forecast_series(series, model, cfg.pipeline, params0)
    record = forecast.to_record()
    if cfg.output is not None:
        write_jsonl(cfg.output, [record])
    print(record.model_dump_json())
    return EXIT_OK


def _asset_label(path: Path) -> str:
    asset = asset_for_path(path.stem)
    return asset.ticker if asset else path.stem


def cmd_backtest(cfg: CliConfig) -> int:
    jobs = []
    closes = {}
    for path in cfg.inputs:
        series = read_ohlcv_csv(path)
        label = _asset_label(path)
        closes[label] = series.close
        for depth in cfg.layers:
            model = cfg.model.model_copy(update={"layers": depth})
            jobs.append(BacktestJob(label, series, model, cfg.pipeline, cfg.split_date))

    max_workers = int(os.getenv("DEEPSSM_MAX_WORKERS", DEFAULT_MAX_WORKERS))
    runs = asyncio.run(run_backtests(jobs, max_workers=max_workers))

    rows = []
    for run in runs:
        records = run.records()
        write_jsonl(cfg.output / forecasts_file_name(run.asset, run.layers), records)
        metrics = score_records(records, symmetric_logloss=cfg.pipeline.symmetric_logloss)
        volatility = cvi(closes[run.asset], cfg.pipeline.cvi_window)
        rows.append(build_summary_row(run.asset, run.layers, metrics, volatility))
    write_jsonl(cfg.output / "metrics.jsonl", rows)

    logger.info(f"Backtest finished: {len(rows)} run(s) written to {cfg.output}")
    print(format_summary_table(rows))
    return EXIT_OK


def cmd_metrics(cfg: CliConfig) -> int:
    reports = []
    for path in cfg.inputs:
        records = read_jsonl(path, BacktestRecord)
        report = score_records(records, symmetric_logloss=cfg.pipeline.symmetric_logloss)
        reports.append(report)
        print(json.dumps({"file": str(path), **report.model_dump()}))
    if cfg.output is not None:
        write_jsonl(cfg.output, reports)
    return EXIT_OK


def cmd_synth(cfg: CliConfig) -> int:
    data = synthesize(cfg.model, cfg.steps)
    csv_path = write_synthetic_csv(data, cfg.output)
    truth_path = cfg.checkpoint or csv_path.with_suffix(".truth.json")
    save_checkpoint(data.params, cfg.model, truth_path)
    print(f"CSV: {csv_path}")
    print(f"Ground truth: {truth_path}")
    return EXIT_OK


def cmd_fetch(cfg: CliConfig) -> int:
    try:
        asset = get_asset(cfg.asset)
    except KeyError as exc:
        raise ConfigurationError(str(exc), field="asset") from exc
    content = fetch_ohlcv(asset.ticker, asset.start, asset.end)
    cfg.output.parent.mkdir(parents=True, exist_ok=True)
    cfg.output.write_bytes(content)
    print(f"{asset.name} ({asset.ticker}): {cfg.output}")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "backtest": cmd_backtest,
    "metrics": cmd_metrics,
    "synth": cmd_synth,
    "fetch": cmd_fetch,
}


# =============================================================================
# Entry point
# =============================================================================

def configure_logging() -> None:
    log_level = os.getenv("DEEPSSM_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, log_level, logging.WARNING),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    configure_logging()
    try:
        cfg = parse_cli(argv)
        configure_logfire()
        with span(f"deepssm.{cfg.command}", command=cfg.command):
            return COMMANDS[cfg.command](cfg)
    except DeepSSMError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        logger.error(f"I/O failure: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        logger.exception(f"Unexpected failure: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
