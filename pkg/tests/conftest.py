import numpy as np
import pytest

from mixture_trader.data import Bar, RegimeSpec, generate_synthetic
from mixture_trader.env import EnvConfig, MarketData

ZERO_COST = EnvConfig(fee_rate=0.0, slippage=0.0)


def two_regime_specs(length: int = 300, drift: float = 2e-4):
    return [
        RegimeSpec("momentum", drift, 1e-3, 0.0, length),
        RegimeSpec("mean_reversion", 0.0, 1e-3, 0.05, length),
    ]


def bars_from_closes(closes, start_ts: int = 1_000, spread: float = 0.0):
    """Bars whose open is the previous close, with optional symmetric wicks."""
    out = []
    prev = float(closes[0])
    for i, c in enumerate(closes):
        c = float(c)
        o = prev
        out.append(Bar(start_ts + 60 * i, o, max(o, c) + spread, min(o, c) - spread, c, 100.0, 100.0 * c))
        prev = c
    return out


@pytest.fixture(scope="session")
def small_bars():
    return generate_synthetic(two_regime_specs(), seed=7)


@pytest.fixture(scope="session")
def small_market(small_bars):
    return MarketData(small_bars)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
