"""Single-contract futures trading environment with a differential Sharpe reward."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import DEFAULT_INDICATORS, Bar, BarArrays, _parse_indicator, as_arrays, first_valid_index, indicator_matrix
from .errors import ConfigError, DomainError, StateError

MARGIN_BREACH = "MarginBreach"
SERIES_END = "SeriesEnd"

FEATURE_CLIP = 10.0
ACCOUNT_FEATURES = ("position", "cumulative_return_pct", "margin_headroom")


@dataclass(frozen=True)
class EnvConfig:
    fee_rate: float = 2.3e-5
    slippage: float = 0.2
    margin_threshold: float = 0.7
    initial_capital: float = 50_000.0
    ema_decay: float = 0.01
    dsr_eps: float = 1e-8

    def __post_init__(self):
        if self.fee_rate < 0:
            raise ConfigError("fee_rate must be >= 0")
        if self.slippage < 0:
            raise ConfigError("slippage must be >= 0")
        if not 0.0 < self.margin_threshold < 1.0:
            raise ConfigError("margin_threshold must lie in (0, 1)")
        if self.initial_capital <= 0:
            raise ConfigError("initial_capital must be > 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.dsr_eps <= 0:
            raise ConfigError("dsr_eps must be > 0")


@dataclass(frozen=True)
class DsrState:
    A: float = 0.0
    B: float = 0.0


class MarketState(NamedTuple):
    price_block: np.ndarray  # open, high, low, close, volume, value
    indicators: np.ndarray


class AccountState(NamedTuple):
    position: int
    cash: float
    margin_ratio: float
    cumulative_return: float


class State(NamedTuple):
    market: MarketState
    account: AccountState


class Transition(NamedTuple):
    state: State
    action: int
    reward: float
    next_state: State
    done: bool
    profit: float = 0.0
    reason: str | None = None


# ------------------------------------------------------------------ mechanics


def apply_action(position: int, action: int) -> tuple[int, int]:
    """Position change for a trading signal; the new position is always the signal."""
    if position not in (-1, 0, 1):
        raise DomainError(f"position must be -1, 0 or 1, got {position}")
    if action not in (-1, 1):
        raise DomainError(f"action must be -1 or 1, got {action}")
    return action, action - position


def compute_profit(p_prev: float, p_now: float, prev_action: int, delta_po: int, cfg: EnvConfig) -> float:
    # r_t = (p_t - p_{t-1} - 2*slippage) * a_{t-1} - fee * p_t * |delta_po|
    profit = (p_now - p_prev - 2.0 * cfg.slippage) * prev_action
    if delta_po != 0:
        profit -= cfg.fee_rate * p_now * abs(delta_po)
    return profit


def compute_dsr(dsr: DsrState, r: float, cfg: EnvConfig) -> tuple[float, DsrState]:
    """Differential Sharpe reward of profit ``r`` and the updated EMA moments.

    Returns 0 while the variance estimate ``B - A**2`` is at or below
    ``cfg.dsr_eps`` (cold start); the moments update regardless.
    """
    delta_a = r - dsr.A
    delta_b = r * r - dsr.B
    var = dsr.B - dsr.A * dsr.A
    if var <= cfg.dsr_eps:
        reward = 0.0
    else:
        reward = (dsr.B * delta_a - 0.5 * dsr.A * delta_b) / var ** 1.5
    eta = cfg.ema_decay
    return reward, DsrState(dsr.A + eta * delta_a, dsr.B + eta * delta_b)


# ------------------------------------------------------------------ features


def _indicator_scale(name: str, values: np.ndarray, close: np.ndarray) -> np.ndarray:
    kind, _ = _parse_indicator(name)
    if kind == "rsi":
        return (values - 50.0) / 50.0
    if kind == "bbpctb":
        return values - 0.5
    if kind == "momentum":
        return values / close * 100.0
    return values / close * 1000.0  # macd histogram, atr


class MarketData:
    """Bars, indicators and normalized network features for one series.

    Built once and shared read-only by every environment over that series.
    """

    def __init__(self, bars: Sequence[Bar] | BarArrays, indicators: Sequence[str] = DEFAULT_INDICATORS):
        arrays = bars if isinstance(bars, BarArrays) else as_arrays(bars)
        if len(arrays.close) < 2:
            raise ConfigError("need at least two bars")
        self.arrays = arrays
        self.indicator_names = tuple(indicators)
        self.indicators = indicator_matrix(arrays, self.indicator_names)
        self.first_valid = first_valid_index(self.indicators)
        self.price_block = np.column_stack(
            [arrays.open, arrays.high, arrays.low, arrays.close, arrays.volume, arrays.value])
        self.features = self._normalized_features()
        for a in (self.indicators, self.price_block, self.features):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.arrays.close)

    @property
    def close(self) -> np.ndarray:
        return self.arrays.close

    @property
    def n_market_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_features(self) -> int:
        return self.n_market_features + len(ACCOUNT_FEATURES)

    def _normalized_features(self) -> np.ndarray:
        a = self.arrays
        prev_close = np.concatenate(([a.open[0]], a.close[:-1]))
        cols = [(x / prev_close - 1.0) * 1000.0 for x in (a.open, a.high, a.low, a.close)]
        for x in (a.volume, a.value):
            lx = np.log1p(x)
            cols.append(np.diff(lx, prepend=lx[0]))
        for j, name in enumerate(self.indicator_names):
            cols.append(_indicator_scale(name, self.indicators[:, j], a.close))
        feats = np.column_stack(cols)
        feats = np.where(np.isfinite(feats), feats, 0.0)
        return np.clip(feats, -FEATURE_CLIP, FEATURE_CLIP)

    def market_state(self, t: int) -> MarketState:
        return MarketState(self.price_block[t], self.indicators[t])


def account_features(position: int, equity: float, cfg: EnvConfig) -> np.ndarray:
    cum = equity / cfg.initial_capital - 1.0
    return np.array([
        float(position),
        max(-FEATURE_CLIP, min(FEATURE_CLIP, cum * 100.0)),
        equity / cfg.initial_capital - cfg.margin_threshold,
    ])


# ----------------------------------------------------------------------- env


class TradingEnv:
    """Steps one contract through ``market`` between ``start`` and ``end`` (exclusive).

    States exist at bar indices ``start .. end-1``; the last one is terminal,
    so a full episode has ``end - start - 1`` transitions.
    """

    def __init__(self, market: MarketData, cfg: EnvConfig | None = None,
                 start: int | None = None, end: int | None = None, record: bool = False):
        self.market = market
        self.cfg = cfg or EnvConfig()
        self.start = market.first_valid if start is None else int(start)
        self.end = len(market) if end is None else int(end)
        if self.start < market.first_valid:
            raise ConfigError(f"start {self.start} precedes indicator warm-up ({market.first_valid})")
        if self.end - self.start < 2 or self.end > len(market):
            raise ConfigError(f"episode [{self.start}, {self.end}) too short or out of range")
        self.record = record
        self.reset()

    def reset(self) -> State:
        self.t = self.start
        self.position = 0
        self.equity = self.cfg.initial_capital
        self.dsr = DsrState()
        self.done = False
        self.reason: str | None = None
        self.trade_count = 0
        self.trace: list[tuple] = []
        return self.state()

    @property
    def n_steps(self) -> int:
        return self.end - self.start - 1

    def account(self) -> AccountState:
        return AccountState(
            self.position,
            self.equity,
            self.equity / self.cfg.initial_capital,
            self.equity / self.cfg.initial_capital - 1.0,
        )

    def state(self) -> State:
        return State(self.market.market_state(self.t), self.account())

    def observation(self) -> np.ndarray:
        """Normalized network input for the current state."""
        return np.concatenate((self.market.features[self.t], account_features(self.position, self.equity, self.cfg)))

    def step(self, action: int) -> Transition:
        if self.done:
            raise StateError("episode finished; call reset()")
        before = self.state()
        new_position, delta = apply_action(self.position, action)
        close = self.market.close
        profit = compute_profit(close[self.t], close[self.t + 1], action, delta, self.cfg)
        reward, self.dsr = compute_dsr(self.dsr, profit, self.cfg)
        self.position = new_position
        self.equity += profit
        self.trade_count += delta != 0
        self.t += 1
        if self.equity < self.cfg.margin_threshold * self.cfg.initial_capital:
            self.done, self.reason = True, MARGIN_BREACH
        elif self.t >= self.end - 1:
            self.done, self.reason = True, SERIES_END
        if self.record:
            self.trace.append((self.t, action, self.position, profit, reward, self.equity, self.done))
        return Transition(before, action, reward, self.state(), self.done, profit, self.reason)

    def export_trace(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "action", "position", "profit", "reward", "equity", "done"])
            for t, a, pos, prof, rew, eq, done in self.trace:
                w.writerow([t, a, pos, repr(prof), repr(rew), repr(eq), int(done)])
