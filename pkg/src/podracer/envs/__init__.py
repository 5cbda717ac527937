from .market import (
    INDICATORS,
    DataError,
    FormatError,
    MarketData,
    OrderingError,
    TickerLookupError,
    compute_indicators,
    exponential_market,
    load_ohlcv,
    synthetic_market,
    write_ohlcv,
)
from .pointmass import PointMass2D, pointmass_factory, pointmass_step
from .stock import (
    PortfolioState,
    StockConfig,
    StockTradingTask,
    execute_trades,
    initial_portfolio,
    stock_env_step,
    stock_factory,
)
from .vec import EnvSpec, VectorizedEnvironment, env_stream

__all__ = [
    "INDICATORS", "DataError", "FormatError", "MarketData", "OrderingError", "TickerLookupError",
    "compute_indicators", "exponential_market", "load_ohlcv", "synthetic_market", "write_ohlcv",
    "PointMass2D", "pointmass_factory", "pointmass_step",
    "PortfolioState", "StockConfig", "StockTradingTask", "execute_trades", "initial_portfolio",
    "stock_env_step", "stock_factory",
    "EnvSpec", "VectorizedEnvironment", "env_stream",
]
