"""
End-to-end tests for the deepssm command line.

Each test drives ``main`` with a short window and few EM iterations on the
bundled BTC-USD fixture (2017-06-01 .. 2018-07-25).
"""

import json
import math
from datetime import date
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from deepssm.cli import main, parse_cli
from deepssm.models import BacktestRecord, MetricsReport, SummaryRow
from deepssm.services.checkpoint import load_checkpoint
from deepssm.services.em import em_fit
from deepssm.services.evaluation import score_records
from deepssm.services.forecasting import walk_forward
from deepssm.services.kalman import kalman_filter
from deepssm.services.market_data import read_ohlcv_csv
from deepssm.services.ssm import Role, init_parameters
from deepssm.services.synth import synthesize
from deepssm.utils import read_jsonl

FAST = ["--tau", "20", "--em-iters", "2", "--n-z", "3"]
SPLIT = "2018-07-20"


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("DEEPSSM_MAX_WORKERS", "1")


class TestParse:
    """Tests for argument parsing."""

    def test_flags_reach_configs(self, btc_csv_path):
        cfg = parse_cli(["backtest", str(btc_csv_path), "--split-date", SPLIT, "--layers", "1", "2",
                         "--no-standardize", "--sigma-q", "1e-4", *FAST])

        assert cfg.layers == [1, 2]
        assert cfg.model.window == 20
        assert cfg.model.sigma_q == 1e-4
        assert not cfg.pipeline.standardize
        assert str(cfg.split_date) == SPLIT

    def test_split_date_help(self, capsys):
        with pytest.raises(SystemExit):
            main(["backtest", "--help"])
        assert "forecasts start the day after" in " ".join(capsys.readouterr().out.split())

    def test_defaults(self, btc_csv_path):
        cfg = parse_cli(["forecast", str(btc_csv_path)])
        assert cfg.model.window == 50
        assert cfg.layers == [3]
        assert cfg.pipeline.standardize


class TestExitCodes:
    """Error classes map to process exit codes."""

    def test_window_longer_than_file(self, btc_csv_path, tmp_path):
        code = main(["fit", str(btc_csv_path), "--checkpoint", str(tmp_path / "c.json"), "--tau", "1000"])
        assert code == 2

    def test_missing_required_flag(self, btc_csv_path):
        assert main(["backtest", str(btc_csv_path)]) == 2

    def test_bad_csv(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("Date,Open,High,Low,Close,Volume\n2021-01-01,1,1,1,1,1\n")
        assert main(["forecast", str(path)]) == 3

    def test_csv_not_utf8(self, tmp_path):
        path = tmp_path / "latin1.csv"
        path.write_bytes("Date,Open,High,Low,Close,Adj Close,Volume\n2021-01-01,1,1,1,1,1,1 \u00e9\n".encode("latin-1"))
        assert main(["forecast", str(path)]) == 3

    def test_missing_file(self, tmp_path):
        assert main(["forecast", str(tmp_path / "nope.csv")]) == 3

    def test_corrupt_checkpoint(self, btc_csv_path, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        assert main(["forecast", str(btc_csv_path), "--checkpoint", str(path)]) == 3

    def test_unknown_asset(self, tmp_path):
        assert main(["fetch", "--asset", "tulips", "--out", str(tmp_path / "x.csv")]) == 2


class TestFitAndForecast:
    """Tests for the fit and forecast commands."""

    def test_fit_writes_loadable_checkpoint(self, btc_csv_path, tmp_path):
        path = tmp_path / "btc.json"
        assert main(["fit", str(btc_csv_path), "--checkpoint", str(path), *FAST]) == 0

        params, config = load_checkpoint(path)
        assert config.window == 20
        assert params.n_z == 3

    def test_same_seed_same_checkpoint(self, btc_csv_path, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        main(["fit", str(btc_csv_path), "--checkpoint", str(a), *FAST])
        main(["fit", str(btc_csv_path), "--checkpoint", str(b), *FAST])
        assert a.read_bytes() == b.read_bytes()

    def test_forecast_from_checkpoint(self, btc_csv_path, tmp_path, capsys):
        checkpoint = tmp_path / "btc.json"
        out = tmp_path / "f.jsonl"
        main(["fit", str(btc_csv_path), "--checkpoint", str(checkpoint), *FAST])
        capsys.readouterr()

        assert main(["forecast", str(btc_csv_path), "--checkpoint", str(checkpoint), "--out", str(out)]) == 0

        record = json.loads(out.read_text())
        assert record["date"] == "2018-07-26"
        assert len(record["mean"]) == 5
        assert 0.0 <= record["p_up"] <= 1.0
        assert json.loads(capsys.readouterr().out) == record


class TestBacktest:
    """Tests for the backtest and metrics commands."""

    @pytest.fixture
    def results(self, btc_csv_path, tmp_path):
        out = tmp_path / "results"
        code = main(["backtest", str(btc_csv_path), "--split-date", SPLIT, "--layers", "1", "2", "3",
                     "--out", str(out), *FAST])
        assert code == 0
        return out

    def test_outputs(self, results, btc_series):
        rows = read_jsonl(results / "metrics.jsonl", SummaryRow)

        assert [r.layers for r in rows] == [1, 2, 3]
        assert all(r.asset == "BTC-USD" for r in rows)
        expected = len(btc_series) - 1 - btc_series.position_of(date.fromisoformat(SPLIT))
        for depth in (1, 2, 3):
            records = read_jsonl(results / f"BTC-USD-L{depth}.forecasts.jsonl", BacktestRecord)
            assert len(records) == expected
            assert rows[depth - 1].metrics.n == expected

    def test_metrics_recomputed_from_file(self, results):
        rows = read_jsonl(results / "metrics.jsonl", SummaryRow)
        for row in rows:
            records = read_jsonl(results / f"BTC-USD-L{row.layers}.forecasts.jsonl", BacktestRecord)
            assert score_records(records) == row.metrics

    def test_metrics_command(self, results, tmp_path):
        out = tmp_path / "m.jsonl"
        path = results / "BTC-USD-L3.forecasts.jsonl"

        assert main(["metrics", str(path), "--out", str(out)]) == 0

        report = read_jsonl(out, MetricsReport)[0]
        assert report == read_jsonl(results / "metrics.jsonl", SummaryRow)[2].metrics

    def test_rerun_is_byte_identical(self, results, btc_csv_path, tmp_path):
        again = tmp_path / "again"
        main(["backtest", str(btc_csv_path), "--split-date", SPLIT, "--layers", "1", "2", "3",
              "--out", str(again), *FAST])
        for name in ("metrics.jsonl", "BTC-USD-L1.forecasts.jsonl", "BTC-USD-L3.forecasts.jsonl"):
            assert (again / name).read_bytes() == (results / name).read_bytes()


class TestSynthAndFetch:
    """Tests for the synth and fetch commands."""

    def test_synth_writes_csv_and_truth(self, tmp_path):
        out = tmp_path / "synth.csv"
        assert main(["synth", "--out", str(out), "--steps", "60", "--n-z", "3", "--seed", "4", "--sigma-r", "0.01"]) == 0

        assert len(read_ohlcv_csv(out)) == 60
        params, config = load_checkpoint(tmp_path / "synth.truth.json")
        assert config.seed == 4
        assert all(params.stack(role).is_nonnegative() for role in Role)

    def test_synth_configures_logfire(self, tmp_path):
        with patch("deepssm.cli.configure_logfire") as configure:
            main(["synth", "--out", str(tmp_path / "s.csv"), "--steps", "30", "--n-z", "2", "--sigma-r", "0.01"])
        configure.assert_called_once()

    def test_fetch(self, csv_text, tmp_path):
        response = MagicMock(ok=True, status_code=200, content=csv_text.encode())
        out = tmp_path / "data" / "BTC-USD.csv"

        with patch("deepssm.services.market_data.requests.get", return_value=response) as get:
            assert main(["fetch", "--asset", "bitcoin", "--out", str(out)]) == 0

        assert "BTC-USD" in get.call_args.args[0]
        assert out.read_text() == csv_text


@pytest.mark.slow
class TestFullRuns:
    """Default-sized runs; each takes tens of seconds."""

    def test_default_backtest_on_fixture(self, btc_csv_path, tmp_path):
        runs = []

        def recording(*args, **kwargs):
            run = walk_forward(*args, **kwargs)
            runs.append(run)
            return run

        with patch("deepssm.services.forecasting.walk_forward", side_effect=recording):
            code = main(["backtest", str(btc_csv_path), "--split-date", "2018-01-01", "--out", str(tmp_path)])

        assert code == 0
        records = read_jsonl(tmp_path / "BTC-USD-L3.forecasts.jsonl", BacktestRecord)
        assert len(records) == 205
        assert all(0.0 <= r.p_up <= 1.0 and r.var_target > 0.0 for r in records)
        (row,) = read_jsonl(tmp_path / "metrics.jsonl", SummaryRow)
        assert all(math.isfinite(v) for v in (row.metrics.rmse, row.metrics.mape_pct, row.metrics.pearson_r))
        assert math.isfinite(row.metrics.log_loss)
        (run,) = runs
        for forecast in run.forecasts:
            eigvals = np.linalg.eigvalsh(forecast.cov)
            assert eigvals.min() >= -1e-9 * eigvals.max()

    def test_synth_output_refits_near_oracle(self, tmp_path):
        out = tmp_path / "synth.csv"
        assert main(["synth", "--out", str(out), "--steps", "300", "--n-z", "3", "--layers", "1", "--seed", "4",
                     "--sigma-q", "0.05", "--sigma-r", "0.05", "--sigma-p", "0.05"]) == 0
        truth, config = load_checkpoint(tmp_path / "synth.truth.json")
        obs = read_ohlcv_csv(out).features()
        controls = synthesize(config, 300).controls
        fit_config = config.model_copy(update={"seed": 5, "em_iters": 200})

        fitted, _, _ = em_fit(init_parameters(fit_config), obs, controls, fit_config)

        def rmse(params):
            innovations = kalman_filter(params, obs, controls).innovations[10:]
            return float(np.sqrt(np.mean(innovations ** 2)))

        assert rmse(fitted) <= 1.10 * rmse(truth)
