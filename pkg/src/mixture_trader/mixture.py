"""Mixture of recurrent actors behind a gumbel-softmax allocation network."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import GruCell, Linear, Module, gumbel_softmax, sample_gumbel
from .ot import TransportProblem, capacity_counts, round_plan, row_targets, sinkhorn_solve
from .ppo import Actor, BatchTargets, Critic, RolloutBuffer, StepOut, actor_rng, critic_rng
from .tensor import Tensor, as_tensor, concat, log, softmax


@dataclass(frozen=True)
class MixtureConfig:
    k: int = 2
    tau: float = 1.0
    lambda_ot: float = 0.1
    disentangle: bool = True
    dis_weight: float = 1.0
    alloc_hidden: int = 8
    error_hidden: int = 4
    ot_epsilon: float = 0.05
    ot_max_iters: int = 500
    ot_tol: float = 1e-6
    ot_round_targets: bool = False
    ot_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lambda_ot < 0 or self.dis_weight < 0:
            raise ConfigError("lambda_ot and dis_weight must be >= 0")
        if self.ot_weights is not None and len(self.ot_weights) != self.k:
            raise ConfigError("ot_weights needs one entry per actor")


class AllocationModule(Module):
    def __init__(self, n_features: int, k: int, state_hidden: int, error_hidden: int, rng: np.random.Generator):
        self.k = k
        self.state_gru = GruCell(n_features, state_hidden, rng)
        self.error_gru = GruCell(k, error_hidden, rng)
        self.fc = Linear(state_hidden + error_hidden, k, rng)

    def init_carry(self, batch: int) -> tuple[Tensor, Tensor]:
        return self.state_gru.initial_state(batch), self.error_gru.initial_state(batch)

    def __call__(self, carry, obs, prev_err, tau: float, noise) -> tuple[Tensor, tuple]:
        """Allocation weights from the state history and the *previous* step's errors."""
        h, d = carry
        h = self.state_gru(h, obs)
        d = self.error_gru(d, as_tensor(prev_err))
        logits = self.fc(concat([h, d], axis=-1))
        return gumbel_softmax(logits, tau, noise=noise), (h, d)


class MixtureNets(Module):
    """k actors with their own encoders, one shared critic and the allocation module."""

    kind = "mixture"
    uses_gumbel = True

    def __init__(self, n_features: int, hidden_dim: int = 16, seed: int = 0, cfg: MixtureConfig | None = None):
        self.cfg = cfg or MixtureConfig()
        self.n_features, self.hidden_dim, self.seed = n_features, hidden_dim, seed
        self.actors = [Actor(n_features, hidden_dim, actor_rng(seed, j)) for j in range(self.cfg.k)]
        self.critic = Critic(n_features, hidden_dim, critic_rng(seed))
        self.alloc = AllocationModule(n_features, self.cfg.k, self.cfg.alloc_hidden, self.cfg.error_hidden,
                                      np.random.default_rng([seed, 3]))

    @property
    def n_actors(self) -> int:
        return self.cfg.k

    def actor_parameters(self):
        return [p for a in self.actors for p in a.parameters()]

    def meta(self) -> dict:
        c = self.cfg
        return {"kind": self.kind, "n_features": self.n_features, "hidden_dim": self.hidden_dim, "seed": self.seed,
                "k": c.k, "tau": c.tau, "alloc_hidden": c.alloc_hidden, "error_hidden": c.error_hidden}

    def init_carry(self, batch: int) -> tuple:
        return (tuple(a.encoder.initial_state(batch) for a in self.actors),
                self.critic.encoder.initial_state(batch),
                self.alloc.init_carry(batch))

    def step(self, carry, obs, prev_err=None, gumbel=None) -> tuple[StepOut, tuple]:
        actor_h, h_c, alloc_carry = carry
        batch = obs.shape[0]
        prev_err = np.zeros((batch, self.cfg.k)) if prev_err is None else prev_err
        gumbel = np.zeros((batch, self.cfg.k)) if gumbel is None else gumbel
        new_h, logits, probs, reps = [], [], [], []
        for actor, h in zip(self.actors, actor_h):
            h, rep, lg = actor(h, obs)
            new_h.append(h)
            reps.append(rep)
            logits.append(lg)
            probs.append(softmax(lg))
        h_c, value = self.critic(h_c, obs)
        q, alloc_carry = self.alloc(alloc_carry, obs, prev_err, self.cfg.tau, gumbel)
        final = combine_actions(q, probs)
        return StepOut(final, logits, probs, reps, q, value), (tuple(new_h), h_c, alloc_carry)


# ------------------------------------------------------------------ operations


def allocate(states, errors, nets: MixtureNets, tau: float | None = None,
             rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Allocation weights for (T, B, F) states given the (T, B, k) per-step errors e_t.

    Step t reads only e_{t-1} (zeros at t = 0), never e_t.
    """
    states = np.asarray(states, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    T, B = states.shape[:2]
    k = nets.cfg.k
    if errors.shape != (T, B, k):
        raise ShapeError(f"errors must be shaped {(T, B, k)}, got {errors.shape}")
    tau = nets.cfg.tau if tau is None else tau
    lagged = np.concatenate([np.zeros((1, B, k)), errors[:-1]], axis=0)
    if noise is None:
        noise = sample_gumbel(rng, (T, B, k)) if rng is not None else np.zeros((T, B, k))
    carry = nets.alloc.init_carry(B)
    out = np.zeros((T, B, k))
    for t in range(T):
        q, carry = nets.alloc(carry, Tensor(states[t]), lagged[t], tau, noise[t])
        out[t] = q.data
    return out


def combine_actions(q, actor_probs) -> Tensor:
    """Per-sample mixture sum_j q[:, j] * actor_probs[j] of the actors' action distributions."""
    q = as_tensor(q)
    if isinstance(actor_probs, (np.ndarray, Tensor)) and as_tensor(actor_probs).ndim == 3:
        ap = as_tensor(actor_probs)
        actor_probs = [ap[:, j, :] for j in range(ap.shape[1])]
    if q.ndim != 2 or q.shape[1] != len(actor_probs):
        raise ShapeError(f"q shape {q.shape} does not match {len(actor_probs)} actors")
    total = None
    for j, p in enumerate(actor_probs):
        term = q[:, j:j + 1] * p
        total = term if total is None else total + term
    return total


def signed_errors(teacher, actor_actions) -> np.ndarray:
    t = np.asarray(teacher, dtype=np.float64)
    a = np.asarray(actor_actions, dtype=np.float64)
    if a.ndim != 2 or t.shape != (a.shape[0],):
        raise ShapeError(f"teacher {t.shape} and actor actions {a.shape} are inconsistent")
    return t[:, None] - a


def error_matrix(teacher, actor_actions) -> np.ndarray:
    """Transport cost |a_teacher - a_ij|, so each entry is 0 or 2."""
    return np.abs(signed_errors(teacher, actor_actions))


def disentangled_loss(reps) -> Tensor:
    """Sum over samples of pairwise dot products between actor representations.

    ``reps`` is an (N, k, d) array/tensor or a list of k (N, d) tensors.
    """
    if isinstance(reps, (list, tuple)):
        xs = [as_tensor(r) for r in reps]
    else:
        r = as_tensor(reps)
        if r.ndim != 3:
            raise ShapeError("reps must be (N, k, d)")
        xs = [r[:, j, :] for j in range(r.shape[1])]
    total = Tensor(0.0)
    for j in range(len(xs)):
        for l in range(j + 1, len(xs)):
            total = total + (xs[j] * xs[l]).sum()
    return total


def ot_alignment(targets: np.ndarray, q) -> Tensor:
    """Mean over samples of sum_j M_ij log q_ij."""
    q = as_tensor(q)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != q.shape:
        raise ShapeError(f"targets {targets.shape} vs q {q.shape}")
    return (log(q) * targets).sum(axis=1).mean()


def actor_objective(clip_term, dis_term, ot_alignment_term, lambda_ot: float) -> Tensor:
    """Objective to maximize: clip - dis + lambda_ot * alignment; dis acts as a similarity penalty."""
    return as_tensor(clip_term) - as_tensor(dis_term) + as_tensor(ot_alignment_term) * lambda_ot


def ot_targets(buffer: RolloutBuffer, index: np.ndarray, cfg: MixtureConfig):
    """Sinkhorn plan over the live samples of ``buffer`` and its per-sample targets."""
    T, B, k = buffer.actor_actions.shape
    teacher = buffer.teacher.reshape(-1)[index]
    acts = buffer.actor_actions.reshape(T * B, k)[index]
    problem = TransportProblem(error_matrix(teacher, acts), cfg.ot_weights, cfg.ot_epsilon,
                               cfg.ot_max_iters, cfg.ot_tol)
    plan = sinkhorn_solve(problem)
    if cfg.ot_round_targets:
        targets = round_plan(plan, capacity_counts(len(index), problem.column_marginals))
    else:
        targets = row_targets(plan)
    return plan, targets


def make_extra_terms(buffer: RolloutBuffer, cfg: MixtureConfig, index: np.ndarray):
    """Objective additions for ppo_update: disentangled penalty and OT alignment.

    Returns None when neither term is active, leaving the plain PPO objective.
    """
    use_ot = cfg.lambda_ot > 0 and cfg.k > 1
    use_dis = cfg.disentangle and cfg.k > 1 and cfg.dis_weight > 0
    if not (use_ot or use_dis):
        return None
    plan = targets = None
    if use_ot:
        plan, targets = ot_targets(buffer, index, cfg)

    def terms(outs: Sequence[StepOut], bt: BatchTargets):
        diag = {}
        dis = Tensor(0.0)
        align = Tensor(0.0)
        n = len(bt.index)
        if use_dis:
            reps = [concat([o.reps[j] for o in outs], axis=0)[bt.index] for j in range(cfg.k)]
            # per-sample, per-coordinate scale so the penalty stays O(1) next to the clip term
            dis = disentangled_loss(reps) * (cfg.dis_weight / (n * reps[0].shape[1]))
            diag["dis_loss"] = dis.item()
        if use_ot:
            q = concat([o.q for o in outs], axis=0)[bt.index]
            align = ot_alignment(targets, q)
            diag["ot_loss"] = align.item()
            diag["ot_converged"] = bool(plan.converged)
            diag["ot_residual"] = max(plan.row_residual, plan.col_residual)
        return actor_objective(0.0, dis, align, cfg.lambda_ot), diag

    return terms


def export_allocation(q: np.ndarray, path: str | Path) -> None:
    """Write per-step weights as ``t,q_1,...,q_k``."""
    q = np.asarray(q, dtype=np.float64)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"q_{j + 1}" for j in range(q.shape[1])])
        for t, row in enumerate(q):
            w.writerow([t] + [repr(float(v)) for v in row])
