"""Minute-bar ingestion, technical indicators and regime-switching synthetic series."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataParseError, OrderingError

CSV_HEADER = ("timestamp", "open", "high", "low", "close", "volume", "value")

DEFAULT_INDICATORS = ("rsi:14", "macd:12:26:9", "bbpctb:20:2", "momentum:10", "atr:14")

# contract multiplier used to synthesize traded value
VALUE_MULTIPLIER = 300.0


@dataclass(frozen=True)
class Bar:
    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float
    value: float

    def validate(self) -> None:
        if not (self.low <= min(self.open, self.close) and self.high >= max(self.open, self.close)):
            raise ValueError("OHLC ordering violated")
        if self.volume < 0 or self.value < 0:
            raise ValueError("negative volume or value")

    def price_block(self) -> tuple[float, float, float, float, float, float]:
        return (self.open, self.high, self.low, self.close, self.volume, self.value)


class BarArrays(NamedTuple):
    timestamp: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    value: np.ndarray


def as_arrays(bars: Sequence[Bar]) -> BarArrays:
    cols = list(zip(*(astuple_bar(b) for b in bars))) if bars else [()] * 7
    return BarArrays(
        np.asarray(cols[0], dtype=np.int64),
        *(np.asarray(c, dtype=np.float64) for c in cols[1:]),
    )


def astuple_bar(b: Bar) -> tuple:
    return (b.timestamp, b.open, b.high, b.low, b.close, b.volume, b.value)


# --------------------------------------------------------------------------- csv


def load_bars(path: str | Path, format: str = "csv") -> list[Bar]:
    """Read bars from a CSV file with the documented header.

    Timestamps must be strictly increasing; a duplicate or backwards
    timestamp raises :class:`OrderingError` naming the line.
    """
    if format != "csv":
        raise ConfigError(f"unsupported bar format {format!r}")
    path = Path(path)
    bars: list[Bar] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataParseError("empty file", line=1) from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataParseError(f"header must be {','.join(CSV_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataParseError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", line=lineno)
            try:
                bar = Bar(int(row[0]), *(float(x) for x in row[1:]))
            except ValueError as exc:
                raise DataParseError(f"malformed value ({exc})", line=lineno) from None
            if not all(math.isfinite(x) for x in astuple_bar(bar)[1:]):
                raise DataParseError("non-finite value", line=lineno)
            try:
                bar.validate()
            except ValueError as exc:
                raise DataParseError(str(exc), line=lineno) from None
            if bars and bar.timestamp <= bars[-1].timestamp:
                kind = "duplicate" if bar.timestamp == bars[-1].timestamp else "non-increasing"
                raise OrderingError(f"{kind} timestamp {bar.timestamp}", line=lineno)
            bars.append(bar)
    return bars


def save_bars(bars: Iterable[Bar], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for b in bars:
            writer.writerow([b.timestamp, *(repr(float(x)) for x in astuple_bar(b)[1:])])


# -------------------------------------------------------------------- indicators


@dataclass(frozen=True)
class IndicatorVector:
    values: tuple[float, ...]
    names: tuple[str, ...]
    valid: tuple[bool, ...]

    @property
    def complete(self) -> bool:
        return all(self.valid)


def _ema(x: np.ndarray, span: int, start: int) -> np.ndarray:
    """EMA seeded with the simple mean of x[start:start+span]; NaN before."""
    out = np.full_like(x, np.nan)
    if start + span > len(x):
        return out
    alpha = 2.0 / (span + 1.0)
    out[start + span - 1] = x[start:start + span].mean()
    for t in range(start + span, len(x)):
        out[t] = out[t - 1] + alpha * (x[t] - out[t - 1])
    return out


def _wilder(x: np.ndarray, period: int, start: int) -> np.ndarray:
    out = np.full_like(x, np.nan)
    if start + period > len(x):
        return out
    out[start + period - 1] = x[start:start + period].mean()
    for t in range(start + period, len(x)):
        out[t] = (out[t - 1] * (period - 1) + x[t]) / period
    return out


def rsi(close: np.ndarray, period: int = 14) -> np.ndarray:
    diff = np.diff(close, prepend=close[0])
    gain = _wilder(np.maximum(diff, 0.0), period, 1)
    loss = _wilder(np.maximum(-diff, 0.0), period, 1)
    out = np.full_like(close, np.nan)
    ok = ~np.isnan(gain)
    g, l = gain[ok], loss[ok]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 100.0 - 100.0 / (1.0 + g / l)
    val = np.where(l == 0.0, np.where(g == 0.0, 50.0, 100.0), val)
    out[ok] = val
    return out


def macd_histogram(close: np.ndarray, fast: int = 12, slow: int = 26, signal: int = 9) -> np.ndarray:
    line = _ema(close, fast, 0) - _ema(close, slow, 0)
    first = slow - 1
    sig = _ema(np.nan_to_num(line), signal, first)
    return line - sig


def bollinger_pctb(close: np.ndarray, period: int = 20, width: float = 2.0) -> np.ndarray:
    out = np.full_like(close, np.nan)
    if len(close) < period:
        return out
    windows = np.lib.stride_tricks.sliding_window_view(close, period)
    mean = windows.mean(axis=1)
    sd = windows.std(axis=1)
    lower = mean - width * sd
    with np.errstate(divide="ignore", invalid="ignore"):
        pctb = (close[period - 1:] - lower) / (2.0 * width * sd)
    out[period - 1:] = np.where(sd > 0.0, pctb, 0.5)
    return out


def momentum(close: np.ndarray, period: int = 10) -> np.ndarray:
    out = np.full_like(close, np.nan)
    out[period:] = close[period:] - close[:-period]
    return out


def atr(high: np.ndarray, low: np.ndarray, close: np.ndarray, period: int = 14) -> np.ndarray:
    prev = np.concatenate(([close[0]], close[:-1]))
    tr = np.maximum(high - low, np.maximum(np.abs(high - prev), np.abs(low - prev)))
    return _wilder(tr, period, 1)


def _parse_indicator(name: str) -> tuple[str, tuple[float, ...]]:
    kind, *args = name.split(":")
    defaults = {
        "rsi": (14,),
        "macd": (12, 26, 9),
        "bbpctb": (20, 2.0),
        "momentum": (10,),
        "atr": (14,),
    }
    if kind not in defaults:
        raise ConfigError(f"unknown indicator {name!r}; known kinds: {sorted(defaults)}")
    if not args:
        return kind, defaults[kind]
    if len(args) != len(defaults[kind]):
        raise ConfigError(f"indicator {name!r} takes {len(defaults[kind])} parameters")
    try:
        params = tuple(float(a) for a in args)
    except ValueError:
        raise ConfigError(f"bad indicator parameters in {name!r}") from None
    if any(p <= 0 for p in params):
        raise ConfigError(f"indicator parameters must be positive in {name!r}")
    return kind, params


def validate_indicator_config(config: Sequence[str]) -> None:
    for name in config:
        _parse_indicator(name)


def indicator_matrix(arrays: BarArrays, config: Sequence[str] = DEFAULT_INDICATORS) -> np.ndarray:
    """Return a (T, n_indicators) matrix with NaN where an indicator is still warming up."""
    n = len(arrays.close)
    cols = []
    for name in config:
        kind, p = _parse_indicator(name)
        c = arrays.close
        if kind == "rsi":
            cols.append(rsi(c, int(p[0])))
        elif kind == "macd":
            cols.append(macd_histogram(c, int(p[0]), int(p[1]), int(p[2])))
        elif kind == "bbpctb":
            cols.append(bollinger_pctb(c, int(p[0]), p[1]))
        elif kind == "momentum":
            cols.append(momentum(c, int(p[0])))
        else:
            cols.append(atr(arrays.high, arrays.low, c, int(p[0])))
    if not cols:
        return np.zeros((n, 0))
    return np.column_stack(cols)


def compute_indicators(bars: Sequence[Bar], config: Sequence[str] = DEFAULT_INDICATORS) -> list[IndicatorVector]:
    if not bars:
        raise ConfigError("compute_indicators needs at least one bar")
    validate_indicator_config(config)
    mat = indicator_matrix(as_arrays(bars), config)
    names = tuple(config)
    out = []
    for row in mat:
        valid = tuple(bool(v) for v in np.isfinite(row))
        out.append(IndicatorVector(tuple(float(v) for v in row), names, valid))
    return out


def first_valid_index(matrix: np.ndarray) -> int:
    """Index of the first row from which every indicator column stays finite."""
    if matrix.shape[1] == 0:
        return 0
    bad = np.where(~np.isfinite(matrix).all(axis=1))[0]
    return 0 if len(bad) == 0 else int(bad[-1]) + 1


# --------------------------------------------------------------------- synthetic


class Regime(str, enum.Enum):
    MOMENTUM = "momentum"
    MEAN_REVERSION = "mean_reversion"


@dataclass(frozen=True)
class RegimeSpec:
    regime: Regime
    drift: float = 0.0
    noise_sigma: float = 0.001
    reversion_strength: float = 0.0
    length: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.length < 1:
            raise ConfigError("regime length must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.reversion_strength <= 1.0:
            raise ConfigError("reversion_strength must lie in [0, 1]")


def ou_log_step(log_price: float, anchor: float, strength: float, sigma: float, z: float) -> float:
    """One pullback step of log-price toward ``anchor``."""
    return log_price + strength * (anchor - log_price) + sigma * z


def generate_synthetic(
    specs: Sequence[RegimeSpec],
    seed: int,
    p0: float = 3000.0,
    start_timestamp: int = 1_500_000_000,
    bar_seconds: int = 60,
    wick: float = 5e-4,
) -> list[Bar]:
    if not specs:
        raise ConfigError("at least one regime is required")
    if p0 <= 0:
        raise ConfigError("p0 must be positive")
    rng = np.random.default_rng(seed)
    total = sum(s.length for s in specs)
    z = rng.standard_normal(total)
    u = rng.uniform(0.0, wick, size=(total, 2))
    vol = np.floor(rng.lognormal(mean=6.0, sigma=0.5, size=total))

    closes = np.empty(total)
    price = float(p0)
    t = 0
    for spec in specs:
        anchor = math.log(price)
        for _ in range(spec.length):
            if spec.regime is Regime.MOMENTUM:
                price = price * (1.0 + spec.drift + spec.noise_sigma * z[t])
            else:
                price = math.exp(ou_log_step(math.log(price), anchor, spec.reversion_strength, spec.noise_sigma, z[t]))
            if price <= 0:
                raise ConfigError("synthetic price went non-positive; reduce noise_sigma")
            closes[t] = price
            t += 1

    opens = np.concatenate(([p0], closes[:-1]))
    highs = np.maximum(opens, closes) * (1.0 + u[:, 0])
    lows = np.minimum(opens, closes) * (1.0 - u[:, 1])
    return [
        Bar(
            start_timestamp + i * bar_seconds,
            float(opens[i]),
            float(highs[i]),
            float(lows[i]),
            float(closes[i]),
            float(vol[i]),
            float(vol[i] * closes[i] * VALUE_MULTIPLIER),
        )
        for i in range(total)
    ]


def parse_regimes(text: str) -> list[RegimeSpec]:
    """Parse ``kind:drift:sigma:strength:length`` items separated by ``;``.

    ``kind`` is ``momentum``/``M`` or ``mean_reversion``/``R``.
    """
    aliases = {"m": Regime.MOMENTUM, "momentum": Regime.MOMENTUM,
               "r": Regime.MEAN_REVERSION, "mean_reversion": Regime.MEAN_REVERSION}
    specs = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        parts = [p.strip() for p in item.split(":")]
        if len(parts) != 5 or parts[0].lower() not in aliases:
            raise ConfigError(f"bad regime spec {item!r}; want kind:drift:sigma:strength:length")
        try:
            specs.append(RegimeSpec(aliases[parts[0].lower()], float(parts[1]), float(parts[2]),
                                    float(parts[3]), int(parts[4])))
        except ValueError as exc:
            raise ConfigError(f"bad regime spec {item!r}: {exc}") from None
    if not specs:
        raise ConfigError("no regimes given")
    return specs
