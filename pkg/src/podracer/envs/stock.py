"""Multi-ticker stock trading task.

Per step and per ticker the action in [-1, 1] asks to trade
``round(action * max_trade_shares)`` shares at the current close.  Sells are
executed first (capped at shares held, no shorting), then buys in ticker
order (capped at what the balance affords including cost).  Each executed
trade pays ``cost_rate * |shares * price|``.  Reward is the change in
account value ``balance + sum(shares * close)`` from t to t+1.

Observation layout for K tickers (all float64)::

    [balance / initial_capital,
     shares[0..K) / max_trade_shares,
     close[t, 0..K) / close[0, 0..K),
     macd / close[0], rsi_14 / 100, cci_30 / 100, sma_20 / close[0]   (K each)]

so ``state_dim = 1 + 2K + 4K``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import INDICATORS, MarketData, compute_indicators
from .vec import EnvSpec, VectorizedEnvironment


@dataclass(frozen=True)
class StockConfig:
    initial_capital: float = 1_000_000.0
    max_trade_shares: int = 100
    cost_rate: float = 0.002
    reward_scale: float = 1e-4  # applied only by the training task, not stock_env_step


@dataclass(frozen=True)
class PortfolioState:
    balance: float
    shares: np.ndarray
    t: int

    def account_value(self, data: MarketData) -> float:
        return float(self.balance + np.dot(self.shares, data.close[self.t]))


def execute_trades(balance, shares, prices, actions, max_trade_shares, cost_rate):
    """Batched order execution.

    ``balance`` (N,), ``shares``/``actions`` (N, K), ``prices`` (K,).
    Returns new balance, new shares, executed share deltas and costs (N, K).
    """
    balance = np.array(balance, dtype=np.float64)
    shares = np.array(shares, dtype=np.float64)
    desired = np.round(np.clip(actions, -1.0, 1.0) * max_trade_shares)
    delta = np.zeros_like(shares)
    cost = np.zeros_like(shares)

    sell = np.minimum(np.maximum(-desired, 0.0), shares)
    proceeds = sell * prices
    balance += (proceeds - cost_rate * proceeds).sum(axis=1)
    shares -= sell
    delta -= sell
    cost += cost_rate * proceeds

    unit = prices * (1.0 + cost_rate)
    for k in range(shares.shape[1]):
        affordable = np.floor(balance / unit[k]) if unit[k] > 0 else np.zeros_like(balance)
        buy = np.minimum(np.maximum(desired[:, k], 0.0), np.maximum(affordable, 0.0))
        spend = buy * prices[k]
        balance -= spend + cost_rate * spend
        balance = np.maximum(balance, 0.0)  # guards -1e-10 float residue
        shares[:, k] += buy
        delta[:, k] += buy
        cost[:, k] += cost_rate * spend
    return balance, shares, delta, cost


def stock_env_step(state: PortfolioState, action, data: MarketData, config: StockConfig = StockConfig()):
    """Trade at close[t], move to t+1; returns ``(state', reward, done)``."""
    if state.t + 1 >= len(data):
        raise ValueError(f"t={state.t} has no successor in {len(data)} rows")
    before = state.account_value(data)
    bal, sh, _, _ = execute_trades(
        [state.balance], state.shares[None, :], data.close[state.t],
        np.asarray(action, dtype=np.float64)[None, :], config.max_trade_shares, config.cost_rate,
    )
    nxt = PortfolioState(float(bal[0]), sh[0], state.t + 1)
    reward = nxt.account_value(data) - before
    return nxt, reward, nxt.t == len(data) - 1


def initial_portfolio(data: MarketData, config: StockConfig = StockConfig()) -> PortfolioState:
    return PortfolioState(config.initial_capital, np.zeros(len(data.tickers)), 0)


class StockTradingTask:
    """Batched trading task over one market window, always starting at t=0."""

    def __init__(self, data: MarketData, config: StockConfig = StockConfig()):
        if not data.indicators:
            data = compute_indicators(data)
        self.data = data
        self.config = config
        k = len(data.tickers)
        self.k = k
        self.internal_dim = 1 + k + 1  # balance, shares, t
        self.spec = EnvSpec(
            state_dim=1 + 2 * k + len(INDICATORS) * k,
            action_dim=k,
            action_low=-np.ones(k),
            action_high=np.ones(k),
            max_episode_steps=len(data) - 1,
        )
        c0 = data.close[0]
        ind = data.indicators
        self._features = np.concatenate(
            [data.close / c0, ind["macd"] / c0, ind["rsi_14"] / 100.0, ind["cci_30"] / 100.0, ind["sma_20"] / c0],
            axis=1,
        )

    def reset(self, rng):
        row = np.zeros(self.internal_dim)
        row[0] = self.config.initial_capital
        return row

    def step(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        t = states[:, -1].astype(np.int64)
        close = self.data.close
        balance, shares = states[:, 0], states[:, 1:1 + self.k]
        before = balance + np.sum(shares * close[t], axis=1)
        new_bal = np.empty_like(balance)
        new_sh = np.empty_like(shares)
        # rows at different t trade at different prices
        for ti in np.unique(t):
            rows = t == ti
            b, s, _, _ = execute_trades(
                balance[rows], shares[rows], close[ti], actions[rows],
                self.config.max_trade_shares, self.config.cost_rate,
            )
            new_bal[rows], new_sh[rows] = b, s
        t1 = t + 1
        after = new_bal + np.sum(new_sh * close[t1], axis=1)
        nxt = np.column_stack([new_bal, new_sh, t1.astype(np.float64)])
        reward = (after - before) * self.config.reward_scale
        return nxt, reward, t1 >= len(self.data) - 1

    def observe(self, states):
        states = np.asarray(states, dtype=np.float64)
        t = states[:, -1].astype(np.int64)
        return np.column_stack([
            states[:, 0] / self.config.initial_capital,
            states[:, 1:1 + self.k] / self.config.max_trade_shares,
            self._features[t],
        ])


def stock_factory(data: MarketData, config: StockConfig = StockConfig()):
    task = StockTradingTask(data, config)

    def factory(num_envs: int, seed: int = 0) -> VectorizedEnvironment:
        return VectorizedEnvironment(task, num_envs, seed)

    factory.task = task
    return factory
