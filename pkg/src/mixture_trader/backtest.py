"""Policy evaluation on bar series: equity curves, the six metrics and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Bar
from .env import EnvConfig, MarketData, TradingEnv
from .errors import ConfigError
from .expert import DualThrustParams, dual_thrust_series
from .ppo import greedy_actions
from .tensor import Tensor

BARS_PER_DAY = 240
DAYS_PER_YEAR = 252
PERIODS_PER_YEAR = BARS_PER_DAY * DAYS_PER_YEAR
GUARD = 1e-9

BASELINES = ("long_hold", "short_hold", "dual_thrust")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["policy", "metrics", "flags", "trade_count", "termination_reason", "n_steps",
                 "periods_per_year", "initial_equity", "final_equity", "series_file"],
    "properties": {
        "policy": {"type": "string"},
        "metrics": {
            "type": "object",
            "required": ["ARR", "VO", "ASR", "MDD", "CR", "SoR"],
            "properties": {k: {"type": "number"} for k in ("ARR", "VO", "ASR", "MDD", "CR", "SoR")},
            "additionalProperties": False,
        },
        "flags": {
            "type": "object",
            "required": ["asr_zero_variance", "cr_guarded", "sor_guarded"],
            "properties": {k: {"type": "boolean"} for k in ("asr_zero_variance", "cr_guarded", "sor_guarded")},
        },
        "trade_count": {"type": "integer", "minimum": 0},
        "termination_reason": {"type": ["string", "null"]},
        "n_steps": {"type": "integer", "minimum": 0},
        "periods_per_year": {"type": "number", "exclusiveMinimum": 0},
        "initial_equity": {"type": "number"},
        "final_equity": {"type": "number"},
        "series_file": {"type": ["string", "null"]},
    },
}


@dataclass(frozen=True)
class Metrics:
    ARR: float
    VO: float
    ASR: float
    MDD: float
    CR: float
    SoR: float
    asr_zero_variance: bool = False
    cr_guarded: bool = False
    sor_guarded: bool = False

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("ARR", "VO", "ASR", "MDD", "CR", "SoR")}

    def flags(self) -> dict[str, bool]:
        return {k: getattr(self, k) for k in ("asr_zero_variance", "cr_guarded", "sor_guarded")}


def max_drawdown(equity: Sequence[float]) -> float:
    """Largest fall from a running peak, as a fraction of that peak."""
    eq = np.asarray(equity, dtype=np.float64)
    peak = np.maximum.accumulate(eq)
    return float(np.max((peak - eq) / peak))


def metrics(r: Sequence[float], equity: Sequence[float], periods_per_year: float = PERIODS_PER_YEAR) -> Metrics:
    r = np.asarray(r, dtype=np.float64)
    eq = np.asarray(equity, dtype=np.float64)
    if r.size == 0 or eq.size == 0:
        raise ConfigError("metrics need non-empty profit and equity series")
    if np.any(eq <= 0):
        raise ConfigError("equity must stay positive")
    arr = (eq[-1] / eq[0] - 1.0) * (periods_per_year / r.size)
    vo = float(r.std())
    mean = float(r.mean())
    asr_flag = vo == 0.0
    asr = 0.0 if asr_flag else math.sqrt(periods_per_year) * mean / vo
    mdd = max_drawdown(eq)
    cr = arr / max(mdd, GUARD)
    downside = float(np.minimum(r, 0.0).std())
    sor = mean / max(downside, GUARD)
    return Metrics(float(arr), vo, float(asr), mdd, float(cr), float(sor),
                   asr_flag, mdd < GUARD, downside < GUARD)


# -------------------------------------------------------------------- policies


class LongHold:
    name = "long_hold"

    def reset(self, env: TradingEnv) -> None:
        pass

    def act(self, env: TradingEnv) -> int:
        return 1


class ShortHold(LongHold):
    name = "short_hold"

    def act(self, env: TradingEnv) -> int:
        return -1


class DualThrustPolicy:
    name = "dual_thrust"

    def __init__(self, params: DualThrustParams | None = None):
        self.params = params or DualThrustParams()

    def reset(self, env: TradingEnv) -> None:
        self._signals = dual_thrust_series(env.market.arrays, self.params)

    def act(self, env: TradingEnv) -> int:
        return int(self._signals[env.t])


class NetworkPolicy:
    """Greedy policy over a trained network, streaming its recurrent state bar by bar."""

    def __init__(self, nets, name: str = "checkpoint"):
        self.nets = nets
        self.name = name

    def reset(self, env: TradingEnv) -> None:
        k = self.nets.n_actors
        self._carry = self.nets.init_carry(1)
        self._prev_greedy = None
        self.allocations: list[np.ndarray] = []
        self._k = k

    def act(self, env: TradingEnv) -> int:
        close = env.market.close
        if self._prev_greedy is None:
            prev_err = np.zeros((1, self._k))
        else:
            teacher = 1.0 if close[env.t] > close[env.t - 1] else -1.0
            prev_err = (teacher - self._prev_greedy)[None, :]
        out, self._carry = self.nets.step(self._carry, Tensor(env.observation()[None, :]), prev_err,
                                          np.zeros((1, self._k)))
        self._prev_greedy = np.array([greedy_actions(p.data[0]) for p in out.actor_probs], dtype=np.float64)
        if out.q is not None:
            self.allocations.append(out.q.data[0].copy())
        return int(greedy_actions(out.probs.data[0]))


def make_baseline(name: str, expert: DualThrustParams | None = None):
    if name == "long_hold":
        return LongHold()
    if name == "short_hold":
        return ShortHold()
    if name == "dual_thrust":
        return DualThrustPolicy(expert)
    raise ConfigError(f"unknown baseline {name!r}; valid names: {', '.join(BASELINES)}")


# ---------------------------------------------------------------------- reports


@dataclass
class BacktestReport:
    policy: str
    equity_curve: np.ndarray
    profits: np.ndarray
    actions: np.ndarray
    positions: np.ndarray
    metrics: Metrics
    trade_count: int
    termination_reason: str | None
    periods_per_year: float = PERIODS_PER_YEAR
    allocations: np.ndarray | None = field(default=None, repr=False)

    def recompute(self) -> Metrics:
        return metrics(self.profits, self.equity_curve, self.periods_per_year)

    def to_json(self, series_file: str | None = None) -> dict:
        return {
            "policy": self.policy,
            "metrics": self.metrics.values(),
            "flags": self.metrics.flags(),
            "trade_count": int(self.trade_count),
            "termination_reason": self.termination_reason,
            "n_steps": int(len(self.profits)),
            "periods_per_year": float(self.periods_per_year),
            "initial_equity": float(self.equity_curve[0]),
            "final_equity": float(self.equity_curve[-1]),
            "series_file": series_file,
        }

    def write(self, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.policy
        series = out / f"{stem}_series.csv"
        with series.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "action", "position", "profit", "equity"])
            w.writerow([0, "", 0, "", repr(float(self.equity_curve[0]))])
            for i, (a, pos, p, e) in enumerate(zip(self.actions, self.positions, self.profits,
                                                   self.equity_curve[1:]), start=1):
                w.writerow([i, int(a), int(pos), repr(float(p)), repr(float(e))])
        report = out / f"{stem}_report.json"
        report.write_text(json.dumps(self.to_json(series.name), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return report, series


def run_policy(policy, data: Sequence[Bar] | MarketData, cfg: EnvConfig | None = None,
               start: int | None = None, end: int | None = None,
               periods_per_year: float = PERIODS_PER_YEAR) -> BacktestReport:
    """Step ``policy`` through the series once (after indicator warm-up) and score it."""
    market = data if isinstance(data, MarketData) else MarketData(data)
    env = TradingEnv(market, cfg or EnvConfig(), start=start, end=end)
    policy.reset(env)
    equity = [env.equity]
    profits, actions, positions = [], [], []
    while not env.done:
        a = policy.act(env)
        tr = env.step(a)
        profits.append(tr.profit)
        actions.append(a)
        positions.append(env.position)
        equity.append(env.equity)
    eq = np.asarray(equity)
    r = np.asarray(profits)
    allocs = getattr(policy, "allocations", None)
    return BacktestReport(
        getattr(policy, "name", type(policy).__name__), eq, r, np.asarray(actions), np.asarray(positions),
        metrics(r, eq, periods_per_year), env.trade_count, env.reason, periods_per_year,
        np.asarray(allocs) if allocs else None,
    )


def baseline_suite(data: Sequence[Bar] | MarketData, cfg: EnvConfig | None = None,
                   names: Sequence[str] = BASELINES, nets=None, expert: DualThrustParams | None = None,
                   start: int | None = None, end: int | None = None,
                   periods_per_year: float = PERIODS_PER_YEAR) -> dict[str, BacktestReport]:
    """One report per requested baseline (plus ``checkpoint`` when ``nets`` is given), same EnvConfig."""
    market = data if isinstance(data, MarketData) else MarketData(data)
    policies = [make_baseline(n, expert) for n in names]
    if nets is not None:
        policies.append(NetworkPolicy(nets))
    return {p.name: run_policy(p, market, cfg, start, end, periods_per_year) for p in policies}


def comparison_table(reports: dict[str, BacktestReport]) -> list[dict]:
    rows = []
    for name, rep in reports.items():
        row = {"policy": name, **rep.metrics.values(), "trades": rep.trade_count,
               "termination": rep.termination_reason}
        rows.append(row)
    return rows


def write_table(rows: list[dict], path: str | Path) -> None:
    if not rows:
        return
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
