"""Training orchestration: supervised pretrain, imitation on expert demonstrations, then mixture PPO."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backtest import NetworkPolicy, run_policy
from .data import DEFAULT_INDICATORS, Bar, validate_indicator_config
from .env import EnvConfig, MarketData, TradingEnv
from .errors import ConfigError, NumericalAbort
from .expert import DualThrustParams, dual_thrust_series
from .mixture import MixtureConfig, MixtureNets, make_extra_terms
from .nn import SGD, cross_entropy_logits, load_checkpoint, save_checkpoint
from .ppo import (ActorCritic, DemonstrationBuffer, PpoConfig, action_index, clip_loss, compute_gae,
                  discounted_returns, ppo_update, training_rewards, value_loss, collect_rollout)
from .tensor import Tape, Tensor, concat, log, pick, softmax

PHASES = ("pretrain", "imitation", "ppo")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    mode: str = "mixture"
    hidden_dim: int = 16
    train_fraction: float = 0.7
    pretrain: bool = True
    pretrain_epochs: int = 300
    pretrain_lr: float = 0.05
    imitation_epochs: int = 100
    ppo_iterations: int = 100
    indicators: tuple[str, ...] = DEFAULT_INDICATORS
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    expert: DualThrustParams = field(default_factory=DualThrustParams)

    def __post_init__(self):
        if self.mode not in ("mixture", "ppo"):
            raise ConfigError("mode must be 'mixture' or 'ppo'")
        if min(self.pretrain_epochs, self.imitation_epochs, self.ppo_iterations) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        validate_indicator_config(self.indicators)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if hasattr(x, "value") and not isinstance(x, (int, float, str)):
        return x.value
    return x


@dataclass
class TrainResult:
    nets: object
    diagnostics: list[dict]
    phase_log: list[str]
    market: MarketData
    split: int
    demo: DemonstrationBuffer | None = None


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, 100 + stream])


def build_nets(cfg: TrainConfig, n_features: int):
    if cfg.mode == "ppo":
        return ActorCritic(n_features, cfg.hidden_dim, cfg.seed)
    return MixtureNets(n_features, cfg.hidden_dim, cfg.seed, cfg.mixture)


def split_index(market: MarketData, fraction: float) -> int:
    return max(market.first_valid + 2, min(len(market), int(round(len(market) * fraction))))


# ------------------------------------------------------------- demonstrations


def fill_demo_buffer(market: MarketData, env_cfg: EnvConfig, expert: DualThrustParams | None = None,
                     start: int | None = None, end: int | None = None) -> DemonstrationBuffer:
    """Roll the Dual Thrust expert through the environment and keep every SARS tuple."""
    if len(market) < 2:
        raise ConfigError("no data for demonstrations")
    expert = expert or DualThrustParams()
    signals = dual_thrust_series(market.arrays, expert)
    env = TradingEnv(market, env_cfg, start=start, end=end)
    close = market.close
    transitions, obs, acts, rewards, profits, teacher = [], [], [], [], [], []
    while not env.done:
        obs.append(env.observation())
        a = int(signals[env.t])
        teacher.append(1 if close[env.t + 1] > close[env.t] else -1)
        tr = env.step(a)
        transitions.append(tr)
        acts.append(a)
        rewards.append(tr.reward)
        profits.append(tr.profit)
    return DemonstrationBuffer(tuple(transitions), np.asarray(obs), np.asarray(acts, dtype=np.int64),
                               np.asarray(rewards), np.asarray(profits), np.asarray(teacher, dtype=np.int64),
                               env.start)


def demo_windows(db: DemonstrationBuffer, rng: np.random.Generator, n: int, length: int):
    """(T, B, ...) slices of the demonstration at random offsets."""
    length = min(length, len(db))
    starts = rng.integers(0, len(db) - length + 1, size=n)
    idx = starts[None, :] + np.arange(length)[:, None]
    return db.obs[idx], db.actions[idx], db.rewards[idx]


def _unroll_actor(actor, obs: np.ndarray) -> list[Tensor]:
    T, B = obs.shape[:2]
    h = actor.encoder.initial_state(B)
    logits = []
    for t in range(T):
        h, _, lg = actor(h, Tensor(obs[t]))
        logits.append(lg)
    return logits


def _unroll_critic(critic, obs: np.ndarray) -> list[Tensor]:
    T, B = obs.shape[:2]
    h = critic.encoder.initial_state(B)
    values = []
    for t in range(T):
        h, v = critic(h, Tensor(obs[t]))
        values.append(v)
    return values


# ------------------------------------------------------------------ phases


def pretrain(nets, db: DemonstrationBuffer, cfg: TrainConfig, epochs: int | None = None,
             rng: np.random.Generator | None = None) -> list[dict]:
    """Fit every actor (encoder included) to the expert actions by cross-entropy.

    The critic and the allocation module are not touched.
    """
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    rng = rng or _rng(cfg.seed, 0)
    opt = SGD(nets.actor_parameters(), cfg.pretrain_lr, cfg.ppo.momentum, cfg.ppo.max_grad_norm)
    log_rows = []
    for epoch in range(epochs):
        obs, acts, _ = demo_windows(db, rng, cfg.ppo.n_envs, cfg.ppo.rollout_len)
        target = action_index(acts.reshape(-1))
        opt.zero_grad()
        with Tape() as tape:
            loss = Tensor(0.0)
            for actor in nets.actors:
                loss = loss + cross_entropy_logits(concat(_unroll_actor(actor, obs), axis=0), target)
        if not np.isfinite(loss.item()):
            raise NumericalAbort("non-finite pretrain loss", {"epoch": epoch}, phase="pretrain")
        tape.backward(loss)
        opt.step()
        log_rows.append({"phase": "pretrain", "epoch": epoch, "ce_loss": loss.item() / len(nets.actors)})
    return log_rows


def expert_probabilities(nets, db: DemonstrationBuffer, length: int) -> np.ndarray:
    """Each actor's probability of the expert action over consecutive DB windows, shape (k, n)."""
    n = (len(db) // length) * length
    if n == 0:
        length = n = len(db)
    obs = db.obs[:n].reshape(n // length, length, -1).transpose(1, 0, 2)
    acts = db.actions[:n].reshape(n // length, length).T
    idx = action_index(acts.reshape(-1))
    out = []
    for actor in nets.actors:
        probs = softmax(concat(_unroll_actor(actor, obs), axis=0)).data
        out.append(probs[np.arange(len(idx)), idx])
    return np.asarray(out)


def imitation_phase(nets, db: DemonstrationBuffer, cfg: TrainConfig, epochs: int | None = None,
                    rng: np.random.Generator | None = None) -> list[dict]:
    """PPO updates on demonstration windows; old log-probs come from the current actors."""
    if len(db) == 0:
        raise ConfigError("empty demonstration buffer")
    epochs = cfg.imitation_epochs if epochs is None else epochs
    rng = rng or _rng(cfg.seed, 1)
    pc = cfg.ppo
    opt = SGD(nets.parameters(), pc.lr, pc.momentum, pc.max_grad_norm)
    rows = []
    for epoch in range(epochs):
        obs, acts, rewards = demo_windows(db, rng, pc.n_envs, pc.rollout_len)
        rewards = training_rewards(rewards, pc)
        T, B = acts.shape
        a_idx = action_index(acts.reshape(-1))
        rows_idx = np.arange(T * B)
        old = [np.log(softmax(concat(_unroll_actor(a, obs), axis=0)).data[rows_idx, a_idx]) for a in nets.actors]
        values = concat(_unroll_critic(nets.critic, obs), axis=0).data.reshape(T, B)
        adv = np.zeros((T, B))
        ret = np.zeros((T, B))
        for b in range(B):
            adv[:, b] = compute_gae(rewards[:, b], np.append(values[:, b], 0.0), pc.gamma, pc.gae_lambda)
            ret[:, b] = discounted_returns(rewards[:, b], pc.gamma)
        adv = adv.reshape(-1)
        if pc.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        ret = ret.reshape(-1)
        diag = {"phase": "imitation", "epoch": epoch, "mean_reward": float(rewards.mean())}
        for _ in range(pc.epochs):
            opt.zero_grad()
            with Tape() as tape:
                objective = Tensor(0.0)
                for actor, lp_old in zip(nets.actors, old):
                    probs = softmax(concat(_unroll_actor(actor, obs), axis=0))
                    objective = objective + clip_loss(log(pick(probs, a_idx)), lp_old, adv, pc.clip_eps)
                vloss = value_loss(concat(_unroll_critic(nets.critic, obs), axis=0).reshape(-1), ret)
                loss = pc.vf_coef * vloss - objective
            diag["clip_loss"] = objective.item()
            diag["value_loss"] = vloss.item()
            if not np.isfinite(loss.item()):
                raise NumericalAbort("non-finite imitation loss", diag, phase="imitation")
            tape.backward(loss)
            opt.step()
        rows.append(diag)
    return rows


def ppo_phase(nets, market: MarketData, split: int, cfg: TrainConfig, iterations: int | None = None) -> list[dict]:
    """Collect lock-step episodes from the training range and update with the combined objective."""
    iterations = cfg.ppo_iterations if iterations is None else iterations
    pc = cfg.ppo
    episode_rng, action_rng, gumbel_rng = _rng(cfg.seed, 2), _rng(cfg.seed, 3), _rng(cfg.seed, 4)
    opt = SGD(nets.parameters(), pc.lr, pc.momentum, pc.max_grad_norm)
    lo, hi = market.first_valid, split - pc.rollout_len - 1
    if hi <= lo:
        raise ConfigError(f"training range too short for episodes of {pc.rollout_len} steps")
    rows = []
    for it in range(iterations):
        starts = episode_rng.integers(lo, hi + 1, size=pc.n_envs)
        buffer = collect_rollout(nets, market, cfg.env, starts, pc.rollout_len, action_rng, gumbel_rng)
        extra = None
        if cfg.mode == "mixture":
            extra = make_extra_terms(buffer, cfg.mixture, np.flatnonzero(buffer.mask.reshape(-1)))
        try:
            diag = ppo_update(buffer, nets, pc, opt, extra)
        except NumericalAbort as exc:
            raise NumericalAbort(str(exc), exc.diagnostics, phase="ppo") from None
        row = {"phase": "ppo", "epoch": it, "trajectory": buffer.digest(), **diag}
        live = buffer.mask
        row["mean_profit"] = float(buffer.profits[live].mean())
        if cfg.mode == "mixture":
            q = buffer.q[live]
            row["q_row_sum_err"] = float(np.abs(q.sum(axis=-1) - 1.0).max())
            row["q_mean"] = [float(v) for v in q.mean(axis=0)]
        rows.append(row)
    return rows


def train(cfg: TrainConfig, bars: Sequence[Bar] | MarketData, log_path: str | Path | None = None) -> TrainResult:
    """Run pretrain -> demonstrations + imitation -> PPO on the training slice of ``bars``."""
    market = bars if isinstance(bars, MarketData) else MarketData(bars, cfg.indicators)
    split = split_index(market, cfg.train_fraction)
    nets = build_nets(cfg, market.n_features)
    phase_log: list[str] = []
    diagnostics: list[dict] = []

    db = fill_demo_buffer(market, cfg.env, cfg.expert, end=split)
    if cfg.pretrain and cfg.pretrain_epochs > 0:
        phase_log.append("pretrain")
        diagnostics += pretrain(nets, db, cfg)
    phase_log.append("imitation")
    diagnostics += imitation_phase(nets, db, cfg)
    phase_log.append("ppo")
    diagnostics += ppo_phase(nets, market, split, cfg)

    if log_path is not None:
        write_diagnostics(diagnostics, log_path)
    return TrainResult(nets, diagnostics, phase_log, market, split, db)


def evaluate(result: TrainResult, cfg: TrainConfig, periods_per_year: float | None = None):
    """Greedy backtest of the trained nets on the held-out slice."""
    kw = {} if periods_per_year is None else {"periods_per_year": periods_per_year}
    return run_policy(NetworkPolicy(result.nets), result.market, cfg.env, start=result.split, **kw)


# ---------------------------------------------------------------- persistence


def write_diagnostics(rows: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def save_nets(nets, path: str | Path, cfg: TrainConfig | None = None) -> None:
    meta = nets.meta()
    if cfg is not None:
        meta["train_config"] = cfg.to_dict()
    save_checkpoint(path, nets.state_dict(), meta)


def load_nets(path: str | Path):
    params, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "ppo":
        nets = ActorCritic(meta["n_features"], meta["hidden_dim"], meta.get("seed", 0))
    elif kind == "mixture":
        mc = MixtureConfig(k=meta["k"], tau=meta["tau"], alloc_hidden=meta["alloc_hidden"],
                           error_hidden=meta["error_hidden"])
        nets = MixtureNets(meta["n_features"], meta["hidden_dim"], meta.get("seed", 0), mc)
    else:
        raise ConfigError(f"{path}: unknown network kind {kind!r}")
    nets.load_state_dict(params)
    return nets, meta


# ------------------------------------------------------------------- ablations

ABLATIONS = ("MOT", "MOT-NP", "MOT-ND", "MOT-NO")


def ablation_config(cfg: TrainConfig, variant: str, seed: int | None = None) -> TrainConfig:
    """The full model or one of its reduced variants, optionally reseeded."""
    if variant == "MOT":
        out = cfg
    elif variant == "MOT-NP":
        out = replace(cfg, pretrain=False)
    elif variant == "MOT-ND":
        out = replace(cfg, mixture=replace(cfg.mixture, k=1, ot_weights=None))
    elif variant == "MOT-NO":
        out = replace(cfg, mixture=replace(cfg.mixture, lambda_ot=0.0))
    else:
        raise ConfigError(f"unknown variant {variant!r}; valid names: {', '.join(ABLATIONS)}")
    return out if seed is None else replace(out, seed=seed)


def run_ablation(cfg: TrainConfig, market: MarketData, seeds: Sequence[int],
                 variants: Sequence[str] = ABLATIONS, periods_per_year: float | None = None) -> list[dict]:
    """Train and test every (variant, seed) pair; one row per run with the held-out metrics."""
    rows = []
    for variant in variants:
        for seed in seeds:
            vcfg = ablation_config(cfg, variant, seed)
            result = train(vcfg, market)
            report = evaluate(result, vcfg, periods_per_year)
            rows.append({"variant": variant, "seed": int(seed), **report.metrics.values(),
                         "trades": report.trade_count})
    return rows


def median_by_variant(rows: Sequence[dict], key: str = "ARR") -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for row in rows:
        out.setdefault(row["variant"], []).append(row[key])
    return {v: float(np.median(xs)) for v, xs in out.items()}
