import math
import os
from dataclasses import replace

import numpy as np
import pytest

from podracer.agent import make_artifact
from podracer.checkpoint import save_checkpoint
from podracer.envs import StockConfig, StockTradingTask, exponential_market, synthetic_market
from podracer.metrics import (
    DAILY_PERIODS,
    MINUTE_PERIODS,
    BacktestConfig,
    ConfigError,
    DomainError,
    EquityCurve,
    Split,
    annualized_stats,
    backtest_report,
    backtest_snapshots,
    calmar,
    cumulative_return,
    infer_periods_per_year,
    max_drawdown,
    read_equity_csv,
    run_backtest,
    sharpe,
    write_equity_csv,
    write_report_csv,
    write_trades_csv,
)


def brute_force_drawdown(v):
    """All pairs i <= j: worst loss from v[i] to a later v[j]."""
    worst = 0.0
    for i in range(len(v)):
        for j in range(i, len(v)):
            worst = min(worst, (v[j] - v[i]) / v[i])
    return worst


def reference_stats(v, ppy):
    r = [v[i + 1] / v[i] - 1 for i in range(len(v) - 1)]
    growth = 1.0
    for x in r:
        growth *= 1 + x
    mean = sum(r) / len(r)
    sd = math.sqrt(sum((x - mean) ** 2 for x in r) / (len(r) - 1))
    return growth ** (ppy / len(r)) - 1, sd * math.sqrt(ppy), mean, sd


def random_curve(rng, n=200):
    return 100 * np.cumprod(1 + 0.02 * rng.standard_normal(n))


def test_cumulative_return_examples():
    assert cumulative_return([100, 150]) == 0.5
    assert cumulative_return([7.0] * 9) == 0.0
    g, n = 0.003, 250
    curve = 50 * (1 + g) ** np.arange(n + 1)
    assert abs(cumulative_return(curve) - ((1 + g) ** n - 1)) < 1e-10
    with pytest.raises(DomainError):
        cumulative_return([0.0, 1.0])


def test_max_drawdown_examples():
    assert max_drawdown(np.arange(1.0, 20.0)) == 0.0
    assert max_drawdown([100, 50, 120]) == -0.5


@pytest.mark.parametrize("seed", range(5))
def test_max_drawdown_brute_force(seed):
    v = random_curve(np.random.default_rng(seed))
    assert abs(max_drawdown(v) - brute_force_drawdown(v)) < 1e-12


def test_drawdown_zero_iff_nondecreasing():
    rng = np.random.default_rng(9)
    for _ in range(50):
        v = np.cumsum(rng.integers(-1, 3, size=12)) + 20.0
        assert (max_drawdown(v) == 0) == bool(np.all(np.diff(v) >= 0))


def test_annualized_stats_examples():
    g = 0.001
    v = (1 + g) ** np.arange(DAILY_PERIODS + 1)
    ret, vol = annualized_stats(v, DAILY_PERIODS)
    assert ret == pytest.approx((1 + g) ** DAILY_PERIODS - 1, abs=1e-12)
    assert vol < 1e-12
    assert annualized_stats([5.0, 5.0, 5.0, 5.0], DAILY_PERIODS) == (0.0, 0.0)
    with pytest.raises(DomainError):
        annualized_stats(EquityCurve(np.arange(3), [1.0, 2.0, 3.0]).values * np.array([1, -1, 1]), 252)


@pytest.mark.parametrize("seed", range(3))
def test_annualized_stats_reference(seed):
    v = random_curve(np.random.default_rng(seed), 300)
    ret, vol = annualized_stats(v, 252)
    ref_ret, ref_vol, _, _ = reference_stats(list(v), 252)
    assert abs(ret - ref_ret) < 1e-10 and abs(vol - ref_vol) < 1e-10


def test_sharpe_examples():
    with pytest.raises(DomainError):
        sharpe(1.01 ** np.arange(30), 252)
    v = random_curve(np.random.default_rng(1))
    _, _, mean, _ = reference_stats(list(v), 252)
    assert abs(sharpe(v, 252, risk_free_rate=mean * 252)) < 1e-12


def test_sharpe_statistical():
    mu, sigma, n = 0.001, 0.01, 10_000
    r = mu + sigma * np.random.default_rng(0).standard_normal(n)
    v = np.concatenate([[1.0], np.cumprod(1 + r)])
    expected = mu * math.sqrt(252) / sigma
    assert abs(sharpe(v, 252) - expected) < 0.1 * expected


def test_calmar():
    for seed in range(5):
        v = random_curve(np.random.default_rng(seed))
        ret, _ = annualized_stats(v, 252)
        assert abs(calmar(v, 252) - ret / abs(max_drawdown(v))) < 1e-12
    down = 100 * 0.99 ** np.arange(50)
    assert calmar(down, 252) < 0
    with pytest.raises(DomainError):
        calmar(np.arange(1.0, 10.0), 252)


def test_metrics_scale_invariant():
    v = random_curve(np.random.default_rng(4))
    a, b = backtest_report(v, 252), backtest_report(37.5 * v, 252)
    for x, y in zip(a.as_row().values(), b.as_row().values()):
        assert x == pytest.approx(y, rel=1e-9, abs=1e-12)


def test_report_flat_curve_marks_ratios_undefined():
    rep = backtest_report([1e6] * 10, 252)
    assert rep.cumulative_return == 0 and math.isnan(rep.sharpe) and math.isnan(rep.calmar)
    assert "undefined" in rep.table()


def test_equity_curve_validation():
    with pytest.raises(DomainError):
        EquityCurve(np.arange(2), [1.0, 0.0])
    with pytest.raises(ValueError):
        EquityCurve(np.arange(3), [1.0, 2.0])


def test_infer_periods_per_year():
    day = np.datetime64("2021-01-04T00:00:00") + np.arange(5) * np.timedelta64(1, "D")
    minute = np.datetime64("2021-01-04T09:30:00") + np.arange(5) * np.timedelta64(1, "m")
    assert infer_periods_per_year(day) == DAILY_PERIODS
    assert infer_periods_per_year(minute) == MINUTE_PERIODS


def test_split_overlap_is_config_error():
    Split().check()
    with pytest.raises(ConfigError, match="overlaps"):
        Split("2020-01-01", "2020-06-30", "2020-06-01", "2020-12-31").check()
    with pytest.raises(ConfigError):
        Split("2020-02-01", "2020-01-01", "2020-06-01", "2020-12-31").check()


# ---------------------------------------------------------------------------
# backtests


def constant_agent(data, action_value, config=StockConfig()):
    task = StockTradingTask(data, config)
    art = make_artifact(task.spec.state_dim, task.spec.action_dim, np.random.default_rng(0))
    net = art.actor.mean_net
    arrays = [np.zeros_like(a) for a in net.arrays()]
    arrays[-1] = np.full(task.spec.action_dim, float(action_value))
    return replace(art, actor=replace(art.actor, mean_net=net.with_arrays(arrays)))


@pytest.mark.parametrize("growth,price", [(0.001, 10.0), (0.004, 7.3), (-0.002, 13.7)])
def test_buy_and_hold_closed_form(growth, price):
    n_rows = 80
    data = exponential_market(n_rows, growth, price=price)
    cfg = StockConfig(max_trade_shares=10**7, cost_rate=0.0)
    agent = constant_agent(data, 5.0, cfg)
    curve, report, trades = run_backtest(agent, data, None, BacktestConfig(stock=cfg))
    capital = cfg.initial_capital
    shares = math.floor(capital / price)
    invested = shares * price / capital
    expected = (1 + growth) ** (n_rows - 1) * invested + (1 - invested) - 1
    assert abs(report.cumulative_return - expected) < 1e-6
    assert len(trades) == 1 and trades[0].shares_delta == shares
    assert curve.values[0] == capital


def test_hold_agent_keeps_capital():
    data = exponential_market(60, 0.01)
    curve, report, trades = run_backtest(constant_agent(data, 0.0), data)
    assert np.all(curve.values == StockConfig().initial_capital)
    assert report.cumulative_return == 0 and trades == []
    flat = exponential_market(60, 0.0)
    free = StockConfig(cost_rate=0.0)
    report = run_backtest(constant_agent(flat, 0.7, free), flat, None, BacktestConfig(stock=free))[1]
    assert report.cumulative_return == 0


def test_backtest_is_deterministic_and_uses_split():
    data = synthetic_market(300, seed=1)
    days = data.timestamps.astype("datetime64[D]").astype(str)
    split = Split(days[0], days[199], days[200], days[-1])
    task = StockTradingTask(data)
    agent = make_artifact(task.spec.state_dim, task.spec.action_dim, np.random.default_rng(2))
    c1, r1, _ = run_backtest(agent, data, split)
    c2, r2, _ = run_backtest(agent, data, split)
    assert c1.values.tobytes() == c2.values.tobytes() and r1 == r2
    assert len(c1.values) == 100 and c1.timestamps[0] == data.timestamps[200]


def test_backtest_dimension_mismatch():
    data = synthetic_market(60, tickers=("A", "B"))
    with pytest.raises(ConfigError, match="dims"):
        run_backtest(make_artifact(3, 1, np.random.default_rng(0)), data)


def test_csv_writers_round_trip(tmp_path):
    data = synthetic_market(80, seed=3)
    task = StockTradingTask(data)
    agent = make_artifact(task.spec.state_dim, task.spec.action_dim, np.random.default_rng(1))
    curve, report, trades = run_backtest(agent, data)
    write_equity_csv(curve, tmp_path / "eq.csv")
    back = read_equity_csv(tmp_path / "eq.csv")
    assert np.array_equal(back.values, curve.values) and np.array_equal(back.timestamps, curve.timestamps)
    write_trades_csv(trades, tmp_path / "trades.csv")
    lines = (tmp_path / "trades.csv").read_text().splitlines()
    assert lines[0] == "timestamp,ticker,shares_delta,price,cost" and len(lines) == len(trades) + 1
    write_report_csv(report, tmp_path / "r.csv", "agent")
    write_report_csv(report, tmp_path / "r.csv", "again")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].startswith("label,cumulative_return") and len(rows) == 3


def test_backtest_snapshots_orders_by_training_time(tmp_path):
    data = synthetic_market(60, seed=0)
    task = StockTradingTask(data)
    for i, wall in enumerate([30.0, 10.0, 20.0]):
        art = make_artifact(task.spec.state_dim, task.spec.action_dim, np.random.default_rng(i))
        save_checkpoint(art, os.path.join(tmp_path, f"snap-{i}.ckpt"), {"wall_seconds": wall})
    rows = backtest_snapshots(tmp_path, data)
    assert [r[0] for r in rows] == [10.0, 20.0, 30.0]
    assert all(np.isfinite(r[2]) for r in rows)
