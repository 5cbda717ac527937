"""Trading metrics and backtests over held-out market data.

Conventions (per-period simple returns ``r_t = v_t / v_{t-1} - 1``, n of them):

* annual return      ``prod(1 + r_t) ** (P / n) - 1``            (geometric)
* annual volatility  ``std(r_t, ddof=1) * sqrt(P)``
* Sharpe             ``(mean(r_t) - rf / P) * P / annual_volatility`` (arithmetic)
* Calmar             ``annual_return / |max_drawdown|``

``P`` is periods per year: 252 for daily bars, 252 * 390 for US minute bars.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .agent import AgentArtifact
from .envs.market import MarketData, compute_indicators, format_timestamp, parse_timestamp
from .envs.stock import StockConfig, StockTradingTask, execute_trades

DAILY_PERIODS = 252
MINUTE_PERIODS = 252 * 390
VOL_EPS = 1e-12


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EquityCurve:
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if len(self.timestamps) != len(values):
            raise ValueError("timestamps and values differ in length")
        if np.any(values <= 0):
            raise DomainError("equity curve values must be positive")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class BacktestReport:
    cumulative_return: float
    annual_return: float
    annual_volatility: float
    max_drawdown: float
    sharpe: float
    calmar: float
    periods_per_year: int

    def as_row(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("Cumulative return", f"{self.cumulative_return:.3%}"),
            ("Annual return", f"{self.annual_return:.3%}"),
            ("Annual volatility", f"{self.annual_volatility:.3%}"),
            ("Max drawdown", f"{self.max_drawdown:.3%}"),
            ("Sharpe ratio", _fmt(self.sharpe)),
            ("Calmar ratio", _fmt(self.calmar)),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _fmt(x: float) -> str:
    return "undefined" if math.isnan(x) else f"{x:.2f}"


def _values(curve) -> np.ndarray:
    if isinstance(curve, EquityCurve):
        return curve.values
    return np.asarray(curve, dtype=np.float64)


def period_returns(curve) -> np.ndarray:
    v = _values(curve)
    return v[1:] / v[:-1] - 1.0


def cumulative_return(curve) -> float:
    v = _values(curve)
    if len(v) < 2:
        raise ValueError("cumulative return needs at least two points")
    if v[0] == 0:
        raise DomainError("initial value is zero")
    return float((v[-1] - v[0]) / v[0])


def max_drawdown(curve) -> float:
    v = _values(curve)
    if len(v) < 1:
        raise ValueError("empty curve")
    peak = np.maximum.accumulate(v)
    return float(np.min((v - peak) / peak))


def annualized_stats(curve, periods_per_year: float) -> tuple[float, float]:
    v = _values(curve)
    if len(v) < 3:
        raise ValueError("annualized stats need at least three points")
    r = period_returns(v)
    if np.any(1.0 + r <= 0):
        raise DomainError("a period return of -100% or worse has no geometric mean")
    annual_return = float(np.expm1(periods_per_year / len(r) * np.sum(np.log1p(r))))
    annual_vol = float(np.std(r, ddof=1) * math.sqrt(periods_per_year))
    return annual_return, annual_vol


def sharpe(curve, periods_per_year: float, risk_free_rate: float = 0.0) -> float:
    r = period_returns(curve)
    if len(r) < 2:
        raise ValueError("sharpe needs at least two returns")
    sd = float(np.std(r, ddof=1))
    if sd <= VOL_EPS * max(1.0, abs(float(np.mean(r)))):
        raise DomainError("zero volatility: Sharpe ratio undefined")
    excess = float(np.mean(r)) - risk_free_rate / periods_per_year
    return excess * periods_per_year / (sd * math.sqrt(periods_per_year))


def calmar(curve, periods_per_year: float) -> float:
    mdd = max_drawdown(curve)
    if mdd == 0:
        raise DomainError("zero drawdown: Calmar ratio undefined")
    annual_return, _ = annualized_stats(curve, periods_per_year)
    return annual_return / abs(mdd)


def backtest_report(curve, periods_per_year: float, risk_free_rate: float = 0.0) -> BacktestReport:
    """All metrics; undefined ratios (flat curves) are reported as NaN."""
    annual_return, annual_vol = annualized_stats(curve, periods_per_year)
    try:
        sr = sharpe(curve, periods_per_year, risk_free_rate)
    except DomainError:
        sr = float("nan")
    try:
        cr = calmar(curve, periods_per_year)
    except DomainError:
        cr = float("nan")
    return BacktestReport(cumulative_return(curve), annual_return, annual_vol, max_drawdown(curve),
                          sr, cr, int(periods_per_year))


def infer_periods_per_year(timestamps) -> int:
    if len(timestamps) < 2:
        return DAILY_PERIODS
    step = np.median(np.diff(np.asarray(timestamps, dtype="datetime64[s]")).astype(np.int64))
    return MINUTE_PERIODS if step < 6 * 3600 else DAILY_PERIODS


# ---------------------------------------------------------------------------
# backtesting


@dataclass(frozen=True)
class Split:
    train_start: str = "2016-01-01"
    train_end: str = "2020-05-25"
    test_start: str = "2020-05-26"
    test_end: str = "2021-05-26"

    def check(self) -> None:
        ts = {k: _to_day(getattr(self, k)) for k in ("train_start", "train_end", "test_start", "test_end")}
        if ts["train_start"] > ts["train_end"] or ts["test_start"] > ts["test_end"]:
            raise ConfigError("split bounds must satisfy start <= end")
        if ts["train_start"] <= ts["test_end"] and ts["test_start"] <= ts["train_end"]:
            raise ConfigError(
                f"train window {self.train_start}..{self.train_end} overlaps "
                f"backtest window {self.test_start}..{self.test_end}"
            )

    def train(self, data: MarketData) -> MarketData:
        self.check()
        return data.slice(self.train_start, self.train_end)

    def test(self, data: MarketData) -> MarketData:
        self.check()
        return data.slice(self.test_start, self.test_end)


def _to_day(text) -> np.datetime64:
    text = str(text)
    return np.datetime64(text, "D") if len(text) == 10 else parse_timestamp(text).astype("datetime64[D]")


@dataclass(frozen=True)
class BacktestConfig:
    stock: StockConfig = StockConfig()
    periods_per_year: Optional[int] = None  # inferred from bar spacing when None
    risk_free_rate: float = 0.0


@dataclass(frozen=True)
class Trade:
    timestamp: np.datetime64
    ticker: str
    shares_delta: float
    price: float
    cost: float


def run_backtest(artifact: AgentArtifact, data: MarketData, split: Optional[Split] = None,
                 config: BacktestConfig = BacktestConfig()):
    """Deterministic (policy-mean) rollout over the backtest window.

    Indicators are computed on the full series before slicing so the window
    starts warm.  Returns ``(EquityCurve, BacktestReport, trades)``.
    """
    if not data.indicators:
        data = compute_indicators(data)
    window = split.test(data) if split is not None else data
    if len(window) < 3:
        raise ConfigError(f"backtest window has {len(window)} rows; need at least 3")
    task = StockTradingTask(window, config.stock)
    if artifact.state_dim != task.spec.state_dim or artifact.action_dim != task.spec.action_dim:
        raise ConfigError(
            f"artifact dims ({artifact.state_dim}, {artifact.action_dim}) do not match market "
            f"({task.spec.state_dim}, {task.spec.action_dim})"
        )
    close = window.close
    state = task.reset(None)[None, :]
    k = task.k
    values = [config.stock.initial_capital]
    trades: list[Trade] = []
    for t in range(len(window) - 1):
        action = np.clip(artifact.actor.mean(task.observe(state)), -1.0, 1.0)
        bal, sh, delta, cost = execute_trades(
            state[:, 0], state[:, 1:1 + k], close[t], action,
            config.stock.max_trade_shares, config.stock.cost_rate,
        )
        for j in np.flatnonzero(delta[0]):
            trades.append(Trade(window.timestamps[t], window.tickers[j], float(delta[0, j]),
                                float(close[t, j]), float(cost[0, j])))
        state = np.column_stack([bal, sh, [t + 1.0]])
        values.append(float(bal[0] + np.dot(sh[0], close[t + 1])))
    curve = EquityCurve(window.timestamps.copy(), np.array(values))
    ppy = config.periods_per_year or infer_periods_per_year(window.timestamps)
    return curve, backtest_report(curve, ppy, config.risk_free_rate), trades


def backtest_snapshots(snapshot_dir, data: MarketData, split: Optional[Split] = None,
                       config: BacktestConfig = BacktestConfig()):
    """Backtest every checkpoint in a directory.

    Returns ``(wall_seconds, env_steps, cumulative_return, path)`` rows sorted
    by training time, i.e. cumulative return vs. training time.
    """
    from .checkpoint import load_checkpoint_with_meta

    rows = []
    for name in sorted(os.listdir(snapshot_dir)):
        if not name.endswith(".ckpt"):
            continue
        path = os.path.join(snapshot_dir, name)
        artifact, meta = load_checkpoint_with_meta(path)
        _, report, _ = run_backtest(artifact, data, split, config)
        rows.append((float(meta.get("wall_seconds", 0.0)), artifact.env_steps, report.cumulative_return, path))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


# ---------------------------------------------------------------------------
# writers


def write_equity_csv(curve: EquityCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "account_value"])
        for ts, v in zip(curve.timestamps, curve.values):
            w.writerow([format_timestamp(ts), repr(float(v))])


def read_equity_csv(path) -> EquityCurve:
    """Benchmark or saved curve in ``timestamp,account_value`` format."""
    ts, vals = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts.append(parse_timestamp(row["timestamp"]))
            vals.append(float(row["account_value"]))
    return EquityCurve(np.array(ts, dtype="datetime64[s]"), np.array(vals))


def write_trades_csv(trades, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "ticker", "shares_delta", "price", "cost"])
        for tr in trades:
            w.writerow([format_timestamp(tr.timestamp), tr.ticker, repr(tr.shares_delta), repr(tr.price), repr(tr.cost)])


def write_report_csv(report: BacktestReport, path, label: str = "agent") -> None:
    row = {"label": label, **report.as_row()}
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)
