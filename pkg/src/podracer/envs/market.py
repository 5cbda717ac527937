"""OHLCV market data: CSV ingestion, ticker alignment, technical indicators.

CSV format (UTF-8, comma separated, no quoting)::

    timestamp,ticker,open,high,low,close,volume
    2020-05-26T13:30:00Z,AAPL,79.03,79.88,78.97,79.53,1234500

One row per (timestamp, ticker); timestamps are ISO-8601 in UTC and must be
strictly increasing per ticker in file order.

Indicators, all computed per ticker on closes (CCI uses the typical price):

* ``macd``   EMA(12) - EMA(26); each EMA is seeded with the simple mean of
  its first window, then ``ema = a*x + (1-a)*ema`` with ``a = 2/(n+1)``.
* ``rsi_14`` Wilder RSI: first average gain/loss is the mean over changes
  1..14, then ``avg = (13*avg + x)/14``.  No losses -> 100, flat -> 50.
* ``cci_30`` ``(tp - sma30(tp)) / (0.015 * mean|tp - sma30(tp)|)`` with the
  mean deviation taken over the same 30-bar window; zero deviation -> 0.
* ``sma_20`` 20-bar simple moving average of close.

Values before an indicator's first defined index repeat its first defined
value.  Every value at index t uses prices at indices <= t only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

COLUMNS = ("timestamp", "ticker", "open", "high", "low", "close", "volume")
INDICATORS = ("macd", "rsi_14", "cci_30", "sma_20")
MIN_ROWS = 35  # MACD(12, 26, 9) full warm-up


class FormatError(ValueError):
    pass


class OrderingError(ValueError):
    pass


class DataError(ValueError):
    pass


class TickerLookupError(LookupError):
    pass


@dataclass(frozen=True)
class MarketData:
    timestamps: np.ndarray  # datetime64[s], UTC
    tickers: tuple[str, ...]
    open: np.ndarray  # (T, K)
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    indicators: dict = field(default_factory=dict)  # name -> (T, K)
    dropped_rows: int = 0

    def __post_init__(self):
        n, k = len(self.timestamps), len(self.tickers)
        for name in ("open", "high", "low", "close", "volume"):
            if getattr(self, name).shape != (n, k):
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected {(n, k)}")
        for name, arr in self.indicators.items():
            if arr.shape != (n, k):
                raise DataError(f"indicator {name} has shape {arr.shape}, expected {(n, k)}")
        if n > 1 and not np.all(self.timestamps[1:] > self.timestamps[:-1]):
            raise OrderingError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    def slice(self, start=None, end=None) -> MarketData:
        """Rows with ``start <= timestamp <= end`` (dates or ISO strings, inclusive)."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.timestamps >= _bound(start, end_of_day=False)
        if end is not None:
            mask &= self.timestamps <= _bound(end, end_of_day=True)
        return self.take(mask)

    def take(self, index) -> MarketData:
        return replace(
            self,
            timestamps=self.timestamps[index],
            open=self.open[index],
            high=self.high[index],
            low=self.low[index],
            close=self.close[index],
            volume=self.volume[index],
            indicators={k: v[index] for k, v in self.indicators.items()},
        )


def _bound(value, end_of_day: bool) -> np.datetime64:
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[s]")
    text = str(value)
    if len(text) == 10:  # plain date
        day = np.datetime64(text, "D")
        return (day + 1).astype("datetime64[s]") - 1 if end_of_day else day.astype("datetime64[s]")
    return parse_timestamp(text)


def parse_timestamp(text: str) -> np.datetime64:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s")) + "Z"


def load_ohlcv(path, tickers=None) -> MarketData:
    rows: dict[str, dict[np.datetime64, tuple]] = {}
    last_seen: dict[str, np.datetime64] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        for col in COLUMNS:
            if col not in header:
                raise FormatError(f"{path}: missing column {col!r}")
        idx = [header.index(c) for c in COLUMNS]
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                ts = parse_timestamp(rec[idx[0]])
                ticker = rec[idx[1]].strip()
                o, h, l, c, v = (float(rec[i]) for i in idx[2:])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: cannot parse row ({exc})") from None
            prev = last_seen.get(ticker)
            if prev is not None and ts <= prev:
                raise OrderingError(
                    f"{path}:{lineno}: timestamp {rec[idx[0]]} for {ticker} is not after previous row"
                )
            if not (l <= min(o, c) and max(o, c) <= h) or v < 0:
                raise DataError(f"{path}:{lineno}: inconsistent OHLCV bar for {ticker}")
            last_seen[ticker] = ts
            rows.setdefault(ticker, {})[ts] = (o, h, l, c, v)

    if tickers is None:
        tickers = list(rows)
    tickers = [t.strip() for t in tickers]
    for t in tickers:
        if t not in rows:
            raise TickerLookupError(f"ticker {t!r} not present in {path}")
    if not tickers:
        raise DataError(f"{path}: no data rows")

    union = set().union(*(rows[t].keys() for t in tickers))
    common = set(rows[tickers[0]])
    for t in tickers[1:]:
        common &= set(rows[t])
    grid = np.array(sorted(common), dtype="datetime64[s]")
    bars = np.array([[rows[t][ts] for t in tickers] for ts in grid], dtype=np.float64)
    bars = bars.reshape(len(grid), len(tickers), 5)
    return MarketData(
        timestamps=grid,
        tickers=tuple(tickers),
        open=bars[:, :, 0].copy(),
        high=bars[:, :, 1].copy(),
        low=bars[:, :, 2].copy(),
        close=bars[:, :, 3].copy(),
        volume=bars[:, :, 4].copy(),
        dropped_rows=len(union) - len(common),
    )


def write_ohlcv(data: MarketData, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i, ts in enumerate(data.timestamps):
            stamp = format_timestamp(ts)
            for k, t in enumerate(data.tickers):
                w.writerow([stamp, t] + [
                    repr(float(col[i, k])) for col in (data.open, data.high, data.low, data.close, data.volume)
                ])


# ---------------------------------------------------------------------------
# indicators


def _fill_warmup(arr: np.ndarray, first: int) -> np.ndarray:
    arr[:first] = arr[first]
    return arr


def _ema(x: np.ndarray, n: int) -> np.ndarray:
    out = np.full_like(x, np.nan)
    a = 2.0 / (n + 1)
    out[n - 1] = x[:n].mean(axis=0)
    for t in range(n, len(x)):
        out[t] = a * x[t] + (1.0 - a) * out[t - 1]
    return out


def _sma(x: np.ndarray, n: int) -> np.ndarray:
    out = np.full_like(x, np.nan)
    win = np.lib.stride_tricks.sliding_window_view(x, n, axis=0)  # (T-n+1, K, n)
    out[n - 1:] = win.mean(axis=-1)
    return out


def macd(close: np.ndarray) -> np.ndarray:
    line = _ema(close, 12) - _ema(close, 26)
    return _fill_warmup(line, 25)


def rsi(close: np.ndarray, n: int = 14) -> np.ndarray:
    diff = np.diff(close, axis=0)
    gain, loss = np.maximum(diff, 0.0), np.maximum(-diff, 0.0)
    out = np.full_like(close, np.nan)
    avg_g, avg_l = gain[:n].mean(axis=0), loss[:n].mean(axis=0)
    for t in range(n, len(close)):
        if t > n:
            avg_g = (avg_g * (n - 1) + gain[t - 1]) / n
            avg_l = (avg_l * (n - 1) + loss[t - 1]) / n
        with np.errstate(divide="ignore", invalid="ignore"):
            val = 100.0 - 100.0 / (1.0 + avg_g / avg_l)
        val = np.where(avg_l == 0.0, np.where(avg_g == 0.0, 50.0, 100.0), val)
        out[t] = val
    return _fill_warmup(out, n)


def cci(high: np.ndarray, low: np.ndarray, close: np.ndarray, n: int = 30) -> np.ndarray:
    tp = (high + low + close) / 3.0
    win = np.lib.stride_tricks.sliding_window_view(tp, n, axis=0)
    mean = win.mean(axis=-1)
    mad = np.abs(win - mean[..., None]).mean(axis=-1)
    out = np.full_like(tp, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (tp[n - 1:] - mean) / (0.015 * mad)
    out[n - 1:] = np.where(mad == 0.0, 0.0, val)
    return _fill_warmup(out, n - 1)


def compute_indicators(data: MarketData) -> MarketData:
    if len(data) < MIN_ROWS:
        raise DataError(f"need at least {MIN_ROWS} rows for indicators, got {len(data)}")
    ind = {
        "macd": macd(data.close),
        "rsi_14": rsi(data.close),
        "cci_30": cci(data.high, data.low, data.close),
        "sma_20": _fill_warmup(_sma(data.close, 20), 19),
    }
    for name, arr in ind.items():
        if not np.all(np.isfinite(arr)):
            raise DataError(f"indicator {name} is not finite")
    return replace(data, indicators=ind)


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_market(
    num_periods: int,
    tickers=("AAA", "BBB", "CCC"),
    seed: int = 0,
    start="2016-01-04",
    step=np.timedelta64(1, "D"),
    drift: float = 3e-4,
    vol: float = 0.015,
) -> MarketData:
    """Geometric-Brownian OHLCV bars with consistent highs and lows."""
    rng = np.random.default_rng(seed)
    k = len(tickers)
    rets = drift + vol * rng.standard_normal((num_periods, k))
    close = 50.0 * np.exp(np.cumsum(rets, axis=0)) * rng.uniform(0.5, 2.0, size=k)
    opened = np.vstack([close[:1] * np.exp(-rets[:1]), close[:-1]])
    spread = np.abs(rng.normal(0.0, vol / 2, size=(num_periods, k)))
    high = np.maximum(opened, close) * (1.0 + spread)
    low = np.minimum(opened, close) * (1.0 - spread)
    volume = rng.integers(10_000, 1_000_000, size=(num_periods, k)).astype(np.float64)
    ts = np.datetime64(start, "s") + np.arange(num_periods) * step.astype("timedelta64[s]")
    return MarketData(ts, tuple(tickers), opened, high, low, close, volume)


def exponential_market(num_periods: int, growth: float, tickers=("AAA",), price: float = 10.0) -> MarketData:
    """Prices growing by exactly ``growth`` per period; bars are flat (o=h=l=c)."""
    k = len(tickers)
    close = price * (1.0 + growth) ** np.arange(num_periods)[:, None] * np.ones(k)
    ts = np.datetime64("2020-01-01", "s") + np.arange(num_periods) * np.timedelta64(1, "D").astype("timedelta64[s]")
    return MarketData(ts, tuple(tickers), close.copy(), close.copy(), close.copy(), close, np.ones_like(close))
