"""Recurrent actor-critic, rollout collection, GAE and the clipped PPO update."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .env import EnvConfig, MarketData, TradingEnv, Transition
from .errors import ConfigError, ContractError, NumericalAbort, ShapeError
from .nn import SGD, GruCell, Linear, Module, gru_sequence, sample_gumbel
from .tensor import Tape, Tensor, as_tensor, clip, concat, exp, log, minimum, pick, softmax, square, tanh

# logits/probabilities column order
ACTIONS = (-1, 1)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    momentum: float = 0.9
    epochs: int = 4
    batch_size: int = 1024
    n_envs: int = 16
    vf_coef: float = 0.5
    max_grad_norm: float | None = 1.0
    normalize_advantages: bool = True
    exploration: str = "categorical"
    reward_clip: float | None = 5.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.lr < 0 or self.epochs < 0:
            raise ConfigError("lr and epochs must be >= 0")
        if self.batch_size < 1 or self.n_envs < 1 or self.batch_size % self.n_envs:
            raise ConfigError("batch_size must be a positive multiple of n_envs")
        if self.exploration != "categorical":
            raise ConfigError("only categorical exploration is supported")
        if self.reward_clip is not None and self.reward_clip <= 0:
            raise ConfigError("reward_clip must be positive or None")

    @property
    def rollout_len(self) -> int:
        return self.batch_size // self.n_envs


# ------------------------------------------------------------------- networks


class StepOut(NamedTuple):
    probs: Tensor            # (B, 2) final action distribution
    actor_logits: list       # k x (B, 2)
    actor_probs: list        # k x (B, 2)
    reps: list               # k x (B, H) inputs of each actor's last layer
    q: Tensor | None         # (B, k) allocation weights
    value: Tensor            # (B, 1)


class Actor(Module):
    def __init__(self, n_features: int, hidden_dim: int, rng: np.random.Generator):
        self.encoder = GruCell(n_features, hidden_dim, rng)
        self.hidden = Linear(hidden_dim, hidden_dim, rng)
        self.out = Linear(hidden_dim, len(ACTIONS), rng)

    def __call__(self, h_prev: Tensor, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h = self.encoder(h_prev, x)
        # signed, bounded features so the pairwise dot-product penalty can't be met by dead units
        rep = tanh(self.hidden(h))
        return h, rep, self.out(rep)


class Critic(Module):
    def __init__(self, n_features: int, hidden_dim: int, rng: np.random.Generator):
        self.encoder = GruCell(n_features, hidden_dim, rng)
        self.hidden = Linear(hidden_dim, hidden_dim, rng)
        self.out = Linear(hidden_dim, 1, rng)

    def __call__(self, h_prev: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.encoder(h_prev, x)
        return h, self.out(tanh(self.hidden(h)))


def actor_rng(seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, j])


def critic_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2])


class ActorCritic(Module):
    """One GRU actor and one GRU critic; the plain (single-policy) path."""

    kind = "ppo"
    n_actors = 1
    uses_gumbel = False

    def __init__(self, n_features: int, hidden_dim: int = 16, seed: int = 0):
        self.n_features, self.hidden_dim, self.seed = n_features, hidden_dim, seed
        self.actor = Actor(n_features, hidden_dim, actor_rng(seed, 0))
        self.critic = Critic(n_features, hidden_dim, critic_rng(seed))

    @property
    def actors(self) -> list[Actor]:
        return [self.actor]

    def actor_parameters(self) -> list[Tensor]:
        return self.actor.parameters()

    def meta(self) -> dict:
        return {"kind": self.kind, "n_features": self.n_features, "hidden_dim": self.hidden_dim, "seed": self.seed}

    def init_carry(self, batch: int) -> tuple[Tensor, ...]:
        return (self.actor.encoder.initial_state(batch), self.critic.encoder.initial_state(batch))

    def step(self, carry, obs, prev_err=None, gumbel=None) -> tuple[StepOut, tuple]:
        h_a, h_c = carry
        h_a, rep, logits = self.actor(h_a, obs)
        probs = softmax(logits)
        h_c, value = self.critic(h_c, obs)
        return StepOut(probs, [logits], [probs], [rep], None, value), (h_a, h_c)


def encode(cell: GruCell, states) -> list[np.ndarray]:
    """GRU hiddens for a (T, F) or (T, B, F) feature sequence, starting from zeros."""
    xs = np.asarray(states, dtype=np.float64)
    if xs.size == 0:
        return []
    if xs.ndim == 2:
        xs = xs[:, None, :]
    if xs.shape[-1] != cell.input_dim:
        raise ShapeError(f"feature dim {xs.shape[-1]} != encoder input {cell.input_dim}")
    return [h.data for h in gru_sequence(cell, [Tensor(x) for x in xs])]


def run_sequence(policy, obs: np.ndarray, prev_err: np.ndarray | None = None,
                 gumbel: np.ndarray | None = None) -> list[StepOut]:
    """Unroll ``policy`` over (T, B, F) observations from a zero carry."""
    T, B = obs.shape[:2]
    k = policy.n_actors
    prev_err = np.zeros((T, B, k)) if prev_err is None else prev_err
    gumbel = np.zeros((T, B, k)) if gumbel is None else gumbel
    carry = policy.init_carry(B)
    outs = []
    for t in range(T):
        out, carry = policy.step(carry, Tensor(obs[t]), prev_err[t], gumbel[t])
        outs.append(out)
    return outs


# ------------------------------------------------------------------- actions


def greedy_actions(probs: np.ndarray) -> np.ndarray:
    """Argmax over (p(-1), p(+1)) with ties going to +1."""
    return np.where(probs[..., 1] >= probs[..., 0], 1, -1)


def sample_action(logits, mode: str, rng: np.random.Generator) -> tuple[int, float]:
    """Action and its log-probability for one logit pair."""
    z = np.asarray(as_tensor(logits).data, dtype=np.float64).reshape(-1)
    if z.shape != (2,):
        raise ShapeError("sample_action needs two logits")
    p = softmax(Tensor(z)).data
    if mode == "train":
        idx = int(rng.random() < p[1])
    elif mode == "eval":
        idx = int(p[1] >= p[0])
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return ACTIONS[idx], float(np.log(p[idx]))


def action_index(actions: np.ndarray) -> np.ndarray:
    return (np.asarray(actions) == 1).astype(np.int64)


# -------------------------------------------------------------------- buffers


@dataclass
class RolloutBuffer:
    """Arrays shaped (T, B, ...) from lock-step environments; ``mask`` marks live steps."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    profits: np.ndarray
    mask: np.ndarray
    prev_err: np.ndarray
    gumbel: np.ndarray
    actor_actions: np.ndarray
    teacher: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        T, B = self.actions.shape
        for name in ("log_probs", "values", "rewards", "profits", "mask", "teacher"):
            if getattr(self, name).shape != (T, B):
                raise ContractError(f"{name} must be shaped ({T}, {B})")

    def __len__(self) -> int:
        return int(self.mask.sum())

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.actions, self.rewards, self.mask):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class DemonstrationBuffer:
    """Expert trajectory: SARS transitions plus the aligned network inputs.

    Every action came from the expert; the arrays are read-only.
    """

    transitions: tuple[Transition, ...]
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    profits: np.ndarray
    teacher: np.ndarray
    start: int

    def __post_init__(self):
        n = len(self.transitions)
        for name in ("obs", "actions", "rewards", "profits", "teacher"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise ContractError(f"{name} length {len(arr)} != {n} transitions")
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.transitions)


def collect_rollout(policy, market: MarketData, env_cfg: EnvConfig, starts: Sequence[int], length: int,
                    action_rng: np.random.Generator, gumbel_rng: np.random.Generator | None = None,
                    mode: str = "train") -> RolloutBuffer:
    """Run one environment per start index in lock-step for ``length`` transitions."""
    envs = [TradingEnv(market, env_cfg, start=s, end=s + length + 1) for s in starts]
    B, k, F = len(envs), policy.n_actors, market.n_features
    T = length
    buf = {name: np.zeros((T, B)) for name in ("log_probs", "values", "rewards", "profits", "teacher")}
    obs_all = np.zeros((T, B, F))
    actions = np.zeros((T, B), dtype=np.int64)
    mask = np.zeros((T, B), dtype=bool)
    prev_err_all = np.zeros((T, B, k))
    gumbel_all = np.zeros((T, B, k))
    actor_actions = np.zeros((T, B, k), dtype=np.int64)
    q_all = np.ones((T, B, k))

    carry = policy.init_carry(B)
    prev_err = np.zeros((B, k))
    close = market.close
    for t in range(T):
        live = np.array([not e.done for e in envs])
        obs = np.stack([e.observation() if not e.done else np.zeros(F) for e in envs])
        if policy.uses_gumbel and mode == "train" and gumbel_rng is not None:
            g = sample_gumbel(gumbel_rng, (B, k))
        else:
            g = np.zeros((B, k))
        out, carry = policy.step(carry, Tensor(obs), prev_err, g)
        probs = out.probs.data
        if mode == "train":
            act = np.where(action_rng.random(B) < probs[:, 1], 1, -1)
        else:
            act = greedy_actions(probs)
        idx = action_index(act)
        greedy = np.stack([greedy_actions(p.data) for p in out.actor_probs], axis=1)
        cursor = np.array([e.t for e in envs])
        teach = np.where(close[cursor + 1] > close[cursor], 1, -1)

        obs_all[t], actions[t], mask[t] = obs, act, live
        prev_err_all[t], gumbel_all[t], actor_actions[t] = prev_err, g, greedy
        buf["log_probs"][t] = np.log(probs[np.arange(B), idx])
        buf["values"][t] = out.value.data[:, 0]
        buf["teacher"][t] = teach
        if out.q is not None:
            q_all[t] = out.q.data
        for b, env in enumerate(envs):
            if live[b]:
                tr = env.step(int(act[b]))
                buf["rewards"][t, b] = tr.reward
                buf["profits"][t, b] = tr.profit
        prev_err = (teach[:, None] - greedy).astype(np.float64)

    return RolloutBuffer(obs_all, actions, buf["log_probs"], buf["values"], buf["rewards"], buf["profits"],
                         mask, prev_err_all, gumbel_all, actor_actions, buf["teacher"], q_all)


# ------------------------------------------------------------ advantages/losses


def compute_gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Backward recursion A_t = delta_t + gamma*lam*A_{t+1}; ``values`` carries one bootstrap entry."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1:
        raise ContractError(f"need len(values) == len(rewards) + 1, got {v.shape[0]} and {r.shape[0]}")
    adv = np.zeros_like(r)
    running = np.zeros_like(r[0]) if r.ndim > 1 else 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def discounted_returns(rewards, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    running = bootstrap
    for t in range(len(r) - 1, -1, -1):
        running = r[t] + gamma * running
        out[t] = running
    return out


def clip_loss(log_probs_new, log_probs_old, advantages, clip_eps: float) -> Tensor:
    """Clipped surrogate objective (to be maximized), averaged over the batch."""
    new = as_tensor(log_probs_new)
    old = np.asarray(log_probs_old, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if new.shape != old.shape or old.shape != adv.shape:
        raise ShapeError(f"shape mismatch {new.shape}, {old.shape}, {adv.shape}")
    ratio = exp(new - old)
    return minimum(ratio * adv, clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv).mean()


def value_loss(values_pred, returns) -> Tensor:
    pred = as_tensor(values_pred)
    ret = np.asarray(returns, dtype=np.float64)
    if pred.shape != ret.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {ret.shape}")
    return square(pred - ret).mean()


class BatchTargets(NamedTuple):
    index: np.ndarray        # flat (t * B + b) positions of live steps
    action_idx: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def training_rewards(rewards: np.ndarray, cfg: PpoConfig) -> np.ndarray:
    """Rewards as the learner sees them: DSR spikes from a cold EMA state are clipped."""
    r = np.asarray(rewards, dtype=np.float64)
    return r if cfg.reward_clip is None else np.clip(r, -cfg.reward_clip, cfg.reward_clip)


def batch_targets(buffer: RolloutBuffer, cfg: PpoConfig) -> BatchTargets:
    T, B = buffer.actions.shape
    rewards = training_rewards(buffer.rewards, cfg)
    adv = np.zeros((T, B))
    ret = np.zeros((T, B))
    for b in range(B):
        n = int(buffer.mask[:, b].sum())
        if n == 0:
            continue
        r = rewards[:n, b]
        v = np.append(buffer.values[:n, b], 0.0)  # every episode ends in a terminal state
        adv[:n, b] = compute_gae(r, v, cfg.gamma, cfg.gae_lambda)
        ret[:n, b] = discounted_returns(r, cfg.gamma)
    flat = buffer.mask.reshape(-1)
    index = np.flatnonzero(flat)
    a = adv.reshape(-1)[index]
    if cfg.normalize_advantages and len(a) > 1:
        a = (a - a.mean()) / (a.std() + 1e-8)
    return BatchTargets(index, action_index(buffer.actions.reshape(-1)[index]),
                        buffer.log_probs.reshape(-1)[index], a, ret.reshape(-1)[index])


def _check_finite(value: float, name: str, diag: dict) -> None:
    if not np.isfinite(value):
        raise NumericalAbort(f"non-finite {name}", diag)


ExtraTerms = Callable[[list, BatchTargets], tuple[Tensor, dict]]


def ppo_update(buffer: RolloutBuffer, nets, cfg: PpoConfig, optimizer: SGD,
               extra_terms: ExtraTerms | None = None) -> dict:
    """K epochs of full-batch gradient steps on -objective + vf_coef * value loss.

    Old log-probabilities are the ones recorded in ``buffer``. ``extra_terms``
    may add further objective terms computed from the unrolled outputs.
    """
    if len(buffer) == 0:
        raise ContractError("empty rollout buffer")
    targets = batch_targets(buffer, cfg)
    diag = {"clip_loss": 0.0, "value_loss": 0.0,
            "mean_reward": float(buffer.rewards[buffer.mask].mean())}
    for _ in range(cfg.epochs):
        optimizer.zero_grad()
        with Tape() as tape:
            outs = run_sequence(nets, buffer.obs, buffer.prev_err, buffer.gumbel)
            probs = concat([o.probs for o in outs], axis=0)[targets.index]
            values = concat([o.value for o in outs], axis=0)[targets.index].reshape(-1)
            logp = log(pick(probs, targets.action_idx))
            objective = clip_loss(logp, targets.old_log_probs, targets.advantages, cfg.clip_eps)
            diag["clip_loss"] = objective.item()
            if extra_terms is not None:
                extra, extra_diag = extra_terms(outs, targets)
                objective = objective + extra
                diag.update(extra_diag)
            vloss = value_loss(values, targets.returns)
            diag["value_loss"] = vloss.item()
            loss = cfg.vf_coef * vloss - objective
        _check_finite(loss.item(), "ppo loss", diag)
        tape.backward(loss)
        diag["grad_norm"] = optimizer.step()
    return diag


def make_optimizer(params: Sequence[Tensor], cfg: PpoConfig, lr: float | None = None) -> SGD:
    return SGD(params, cfg.lr if lr is None else lr, cfg.momentum, cfg.max_grad_norm)
