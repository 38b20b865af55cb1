"""
Asset registry for backtests and data fetching.

Each entry names a Yahoo Finance ticker and its default backtest date range.
The first training window ends on ``split`` and the first forecast is for
the day after; every later day is refitted and forecast in turn.

Fields per asset:
  ticker   - Yahoo Finance symbol
  name     - display name
  start    - first day to fetch
  end      - last day to fetch
  split    - last day of the first training window (default 2018-01-01)
  fixture  - bundled CSV under deepssm/data/, if any
"""

from dataclasses import dataclass
from datetime import date

DEFAULT_START = date(2014, 1, 1)
LATE_START = date(2015, 1, 1)
DEFAULT_END = date(2021, 6, 1)
DEFAULT_SPLIT = date(2018, 1, 1)


@dataclass(frozen=True)
class Asset:
    key: str
    ticker: str
    name: str
    start: date = DEFAULT_START
    end: date = DEFAULT_END
    split: date = DEFAULT_SPLIT
    fixture: str | None = None

    @property
    def file_name(self) -> str:
        return f"{self.ticker}.csv"


ASSETS: dict[str, Asset] = {
    "bitcoin": Asset(key="bitcoin", ticker="BTC-USD", name="Bitcoin", fixture="BTC-USD.csv"),
    "litecoin": Asset(key="litecoin", ticker="LTC-USD", name="Litecoin"),
    "namecoin": Asset(key="namecoin", ticker="NMC-USD", name="Namecoin"),
    "dogecoin": Asset(key="dogecoin", ticker="DOGE-USD", name="Dogecoin"),
    "peercoin": Asset(key="peercoin", ticker="PPC-USD", name="Peercoin"),
    "ripple": Asset(key="ripple", ticker="XRP-USD", name="Ripple"),
    "nxt": Asset(key="nxt", ticker="NXT-USD", name="NXT"),
    # Later listings: history starts in 2015.
    "gridcoin": Asset(key="gridcoin", ticker="GRC-USD", name="Gridcoin", start=LATE_START),
    "ethereum": Asset(key="ethereum", ticker="ETH-USD", name="Ethereum", start=LATE_START),
    # Yahoo history begins 2017-11-09.
    "binance": Asset(key="binance", ticker="BNB-USD", name="Binance Coin", start=date(2017, 11, 9)),
}


def get_asset(key: str) -> Asset:
    """Look up an asset by registry key or ticker (case-insensitive)."""
    wanted = key.strip().lower()
    for asset in ASSETS.values():
        if wanted in (asset.key, asset.ticker.lower()):
            return asset
    raise KeyError(f"Unknown asset '{key}'. Known: {', '.join(sorted(ASSETS))}")


def asset_for_path(stem: str) -> Asset | None:
    """Registry entry whose ticker matches a CSV file stem, if any."""
    try:
        return get_asset(stem)
    except KeyError:
        return None
