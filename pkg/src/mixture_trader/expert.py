"""Dual Thrust breakout expert and next-move teacher labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Bar, BarArrays, as_arrays
from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class DualThrustParams:
    lookback: int = 20
    k1: float = 0.5
    k2: float = 0.5
    initial_signal: int = 1

    def __post_init__(self):
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigError("k1 and k2 must be positive")
        if self.initial_signal not in (-1, 1):
            raise ConfigError("initial_signal must be -1 or 1")


def _signal(high, low, close, open_now, close_now, params, prev_signal):
    hh, ll = high.max(), low.min()
    hc, lc = close.max(), close.min()
    rng = max(hh - lc, hc - ll)
    if close_now > open_now + params.k1 * rng:
        return 1
    if close_now < open_now - params.k2 * rng:
        return -1
    return prev_signal


def dual_thrust_signal(bars: Sequence[Bar], params: DualThrustParams, prev_signal: int) -> int:
    """Signal for the last bar of ``bars`` using the preceding ``lookback`` bars as range window."""
    n = params.lookback
    if len(bars) < n + 1:
        raise DomainError(f"window needs {n + 1} bars, got {len(bars)}")
    if prev_signal not in (-1, 1):
        raise DomainError("prev_signal must be -1 or 1")
    look = as_arrays(bars[-n - 1:-1])
    cur = bars[-1]
    return _signal(look.high, look.low, look.close, cur.open, cur.close, params, prev_signal)


def dual_thrust_series(bars: Sequence[Bar] | BarArrays, params: DualThrustParams | None = None) -> np.ndarray:
    """Signal at every bar; bars before a full lookback keep ``params.initial_signal``."""
    params = params or DualThrustParams()
    a = bars if isinstance(bars, BarArrays) else as_arrays(bars)
    n = params.lookback
    out = np.full(len(a.close), params.initial_signal, dtype=np.int64)
    sig = params.initial_signal
    for t in range(n, len(a.close)):
        sig = _signal(a.high[t - n:t], a.low[t - n:t], a.close[t - n:t], a.open[t], a.close[t], params, sig)
        out[t] = sig
    return out


def teacher_actions(closes: Sequence[float]) -> np.ndarray:
    """+1 where the next close is higher, -1 otherwise (ties included)."""
    c = np.asarray(closes, dtype=np.float64)
    if len(c) < 2:
        raise DomainError("teacher_actions needs at least two closes")
    return np.where(c[1:] > c[:-1], 1, -1).astype(np.int64)
