"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, dotted keys address a section::

    seed = 3
    ppo.lr = 0.001
    mixture.k = 2
    env.slippage = 0.0
    data.regimes = M:0.0002:0.001:0:1000; R:0:0.001:0.05:1000

Unknown keys are errors. Every default is listed by :func:`reference_text`.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backtest import BASELINES, PERIODS_PER_YEAR
from .env import EnvConfig
from .errors import ConfigError, TraderError
from .expert import DualThrustParams
from .mixture import MixtureConfig
from .ppo import PpoConfig
from .trainer import TrainConfig

SECTIONS = {"env": EnvConfig, "ppo": PpoConfig, "mixture": MixtureConfig, "expert": DualThrustParams}

DEFAULT_REGIMES = ";".join(
    f"M:{d}:0.001:0:1000;R:0:0.001:0.05:1000" for d in ("0.0002", "-0.0002") * 5
)


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    regimes: str = DEFAULT_REGIMES
    p0: float = 3000.0
    bar_seconds: int = 60


@dataclass(frozen=True)
class BacktestConfig:
    periods_per_year: float = float(PERIODS_PER_YEAR)
    baselines: tuple[str, ...] = BASELINES

    def __post_init__(self):
        if self.periods_per_year <= 0:
            raise ConfigError("periods_per_year must be positive")
        bad = [b for b in self.baselines if b not in BASELINES]
        if bad:
            raise ConfigError(f"unknown baseline(s) {bad}; valid names: {', '.join(BASELINES)}")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    backtest: BacktestConfig = field(default_factory=BacktestConfig)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("none", "null", ""):
            return None
        return _coerce(text, next(a for a in args if a is not type(None)), key)
    if origin is tuple:
        item = args[0]
        return tuple(_coerce(p.strip(), item, key) for p in text.split(",") if p.strip())
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {hint.__name__}") from None
    return text


def _apply(obj, prefix: str, items: dict[str, str]):
    hints = typing.get_type_hints(type(obj))
    changes = {}
    for f in fields(obj):
        key = f"{prefix}{f.name}"
        if key in items and not dataclasses.is_dataclass(hints[f.name]):
            changes[f.name] = _coerce(items.pop(key), hints[f.name], key)
    return replace(obj, **changes) if changes else obj


def build(items: dict[str, str]) -> RunConfig:
    """Overlay parsed ``items`` on the defaults; unknown keys raise ConfigError."""
    items = dict(items)
    train = TrainConfig()
    for name in SECTIONS:
        train = replace(train, **{name: _apply(getattr(train, name), f"{name}.", items)})
    train = _apply(train, "", items)
    data = _apply(DataConfig(), "data.", items)
    bt = _apply(BacktestConfig(), "backtest.", items)
    if items:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(items))}")
    return RunConfig(train, data, bt)


def load(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    items: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        items = parse_text(text, str(p))
    items.update(overrides or {})
    try:
        return build(items)
    except TraderError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _format(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def flatten(cfg: RunConfig) -> dict[str, str]:
    """Every setting as ``key -> text``; feeding this back through :func:`build` gives ``cfg``."""
    out: dict[str, str] = {}

    def walk(obj, prefix):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                continue
            out[f"{prefix}{f.name}"] = _format(v)

    walk(cfg.train, "")
    for name in SECTIONS:
        walk(getattr(cfg.train, name), f"{name}.")
    walk(cfg.data, "data.")
    walk(cfg.backtest, "backtest.")
    return out


def reference_text(cfg: RunConfig | None = None) -> str:
    """A complete config file holding every key at its current (default) value."""
    lines = ["# mixture-trader configuration; every key with its default value"]
    section = None
    for key, value in flatten(cfg or RunConfig()).items():
        head = key.split(".")[0] if "." in key else "train"
        if head != section:
            lines += ["", f"# [{head}]"]
            section = head
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
