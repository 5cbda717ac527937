"""Experiment configuration in a plain ``key = value`` text format.

Grammar, one setting per line::

    # comment (also allowed after a value)
    task = stock
    pod.stop.max_steps = 300000
    data.tickers = AAPL, MSFT

Keys are dotted paths into :class:`ExperimentConfig`; every key is optional
and missing keys take the documented defaults.  Values are integers, floats
(``inf`` allowed), booleans (``true``/``false``), strings or comma-separated
lists.  Relative paths are resolved against the config file's directory.

:func:`echo_config` writes every effective setting in the same grammar, so
``parse -> echo -> parse`` reproduces the config exactly.
"""
from __future__ import annotations

import difflib
import math
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Optional

from .algos import ALGORITHMS
from .envs.stock import StockConfig
from .metrics import BacktestConfig, Split
from .pod import PodConfig
from .ppo import PpoConfig
from .tournament import PoolConfig

TASKS = ("pointmass", "stock")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AgentSettings:
    algo: str = "ppo"
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5


@dataclass(frozen=True)
class DataSettings:
    csv: str = ""
    tickers: tuple = ()  # empty: every ticker in the file
    train_start: str = Split.train_start
    train_end: str = Split.train_end
    test_start: str = Split.test_start
    test_end: str = Split.test_end

    @property
    def split(self) -> Split:
        return Split(self.train_start, self.train_end, self.test_start, self.test_end)


@dataclass(frozen=True)
class BacktestSettings:
    periods_per_year: int = 0  # 0: infer from bar spacing
    risk_free_rate: float = 0.0


@dataclass(frozen=True)
class MonitorSettings:
    control_file: str = ""
    poll_interval: float = 5.0


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "pointmass"
    seed: int = 0
    output_dir: str = ""
    serial: bool = False
    agent: AgentSettings = field(default_factory=AgentSettings)
    pod: PodConfig = field(default_factory=PodConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    monitor: MonitorSettings = field(default_factory=MonitorSettings)
    data: DataSettings = field(default_factory=DataSettings)
    stock: StockConfig = field(default_factory=StockConfig)
    backtest: BacktestSettings = field(default_factory=BacktestSettings)

    def backtest_config(self) -> BacktestConfig:
        return BacktestConfig(self.stock, self.backtest.periods_per_year or None, self.backtest.risk_free_rate)


_TUPLE_ITEM = {"agent.hidden": int, "data.tickers": str}
_PATH_KEYS = ("data.csv", "monitor.control_file", "output_dir")


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(value):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = value
    return out


DEFAULTS = _flatten(ExperimentConfig())
KNOWN_KEYS = tuple(DEFAULTS)


def _unflatten(cls, values: dict, prefix: str = ""):
    default = cls()
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        if is_dataclass(getattr(default, f.name)):
            kwargs[f.name] = _unflatten(type(getattr(default, f.name)), values, key + ".")
        else:
            kwargs[f.name] = values[key]
    try:
        return cls(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        if prefix and not msg.startswith(prefix):
            msg = f"{prefix.rstrip('.')}: {msg}"
        raise ConfigError(msg) from None


def _parse_value(key: str, text: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        value = float(text)
        if math.isnan(value):
            raise ValueError("nan is not allowed")
        return value
    if isinstance(default, tuple):
        item = _TUPLE_ITEM[key]
        return tuple(item(p.strip()) for p in text.split(",") if p.strip())
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_text(text: str, source: str = "<config>", base_dir: str = ".") -> ExperimentConfig:
    values = dict(DEFAULTS)
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            near = difflib.get_close_matches(key, KNOWN_KEYS, n=1, cutoff=0.0)
            hint = f"; nearest known key is '{near[0]}'" if near else ""
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'{hint}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}' (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            values[key] = _parse_value(key, value)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from None
    for key in _PATH_KEYS:
        if values[key] and not os.path.isabs(values[key]):
            values[key] = os.path.normpath(os.path.join(base_dir, values[key]))
    cfg = _unflatten(ExperimentConfig, values)
    validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_text(text, str(path), os.path.dirname(os.path.abspath(path)))


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field and filesystem checks; messages name every field involved."""
    if cfg.task not in TASKS:
        raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {cfg.task!r}")
    if cfg.pod.buffer_size != cfg.ppo.buffer_size:
        raise ConfigError(
            f"pod.num_workers*pod.envs_per_worker*pod.rollout_horizon = {cfg.pod.buffer_size} "
            f"must equal ppo.buffer_size = {cfg.ppo.buffer_size}"
        )
    if cfg.pool.generator.top_k > cfg.pool.leaderboard_capacity:
        raise ConfigError(
            f"pool.generator.top_k ({cfg.pool.generator.top_k}) exceeds "
            f"pool.leaderboard_capacity ({cfg.pool.leaderboard_capacity})"
        )
    if cfg.agent.algo not in ALGORITHMS:
        raise ConfigError(f"agent.algo must be one of {', '.join(ALGORITHMS)}, got {cfg.agent.algo!r}")
    if not cfg.agent.hidden or any(h < 1 for h in cfg.agent.hidden):
        raise ConfigError(f"agent.hidden must list positive layer widths, got {cfg.agent.hidden}")
    if cfg.task == "stock":
        if not cfg.data.csv:
            raise ConfigError("task = stock requires data.csv")
        if not os.path.isfile(cfg.data.csv):
            raise ConfigError(f"data.csv: file not found: {cfg.data.csv}")
        try:
            cfg.data.split.check()
        except ValueError as exc:
            raise ConfigError(f"data.train_end/data.test_start: {exc}") from None
    if cfg.stock.max_trade_shares < 1 or cfg.stock.initial_capital <= 0 or cfg.stock.cost_rate < 0:
        raise ConfigError("stock.max_trade_shares >= 1, stock.initial_capital > 0 and stock.cost_rate >= 0 required")


def echo_config(cfg: ExperimentConfig) -> str:
    lines = [
        "# effective configuration (every key, defaults included)",
        "# network: tanh hidden layers, linear output, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases",
    ]
    for key, value in _flatten(cfg).items():
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, output_dir: Optional[str] = None,
                   serial: Optional[bool] = None) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if output_dir is not None:
        changes["output_dir"] = os.path.abspath(output_dir)
    if serial:
        changes["serial"] = True
    return replace(cfg, **changes) if changes else cfg
