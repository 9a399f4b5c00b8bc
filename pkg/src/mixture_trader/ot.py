"""Balanced sample-to-actor transport: entropic Sinkhorn solver and an exact enumeration oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ContractError

LOG_DOMAIN_BELOW = 0.02
ORACLE_MAX_N = 12


@dataclass(frozen=True)
class TransportProblem:
    cost: np.ndarray
    column_marginals: np.ndarray | None = None
    epsilon_reg: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=np.float64)
        if cost.ndim != 2 or cost.size == 0:
            raise ConfigError("cost must be a non-empty N x k matrix")
        if not np.all(np.isfinite(cost)):
            raise ConfigError("cost must be finite")
        k = cost.shape[1]
        w = np.full(k, 1.0 / k) if self.column_marginals is None else np.asarray(self.column_marginals, float)
        if w.shape != (k,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("column marginals must be k positive fractions summing to 1")
        if self.epsilon_reg <= 0:
            raise ConfigError("epsilon_reg must be positive")
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "column_marginals", w)

    @property
    def row_mass(self) -> np.ndarray:
        n = self.cost.shape[0]
        return np.full(n, 1.0 / n)


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    converged: bool
    iterations_used: int
    row_residual: float
    col_residual: float


def _residuals(plan, a, b):
    return float(np.abs(plan.sum(axis=1) - a).max()), float(np.abs(plan.sum(axis=0) - b).max())


def _log_domain_scaled(cost, a, b, eps, max_iters, tol):
    """Log-domain Sinkhorn with epsilon scaling.

    Potentials are kept in cost units and warm-started while the
    regularization halves from the cost range down to ``eps``. Only the last
    stage solves the requested problem; the coarser ones shorten the approach
    when the optimal potentials lie many multiples of ``eps`` apart.
    """
    log_a, log_b = np.log(a), np.log(b)
    f, g = np.zeros_like(a), np.zeros_like(b)
    schedule = [eps]
    while schedule[-1] * 2.0 < cost.max():
        schedule.append(schedule[-1] * 2.0)
    warmup_budget = max(1, max_iters // (4 * len(schedule)))
    for stage, e in enumerate(reversed(schedule)):
        last = stage == len(schedule) - 1
        for it in range(1, (max_iters if last else warmup_budget) + 1):
            f = e * (log_a - logsumexp((g[None, :] - cost) / e, axis=1))
            g = e * (log_b - logsumexp((f[:, None] - cost) / e, axis=0))
            plan = np.exp((f[:, None] + g[None, :] - cost) / e)
            rr, cr = _residuals(plan, a, b)
            if rr < tol and cr < tol:
                break
    return plan, bool(rr < tol and cr < tol), it


def sinkhorn_solve(problem: TransportProblem) -> TransportPlan:
    """Alternate row/column scaling of exp(-cost/eps) until both marginals are within ``tol``.

    Switches to log-domain updates when ``epsilon_reg`` is small enough for
    the kernel to underflow.
    """
    a, b = problem.row_mass, problem.column_marginals
    eps = problem.epsilon_reg
    # cost shift leaves the plan unchanged; subtracting the minimum keeps the kernel in range
    cost = problem.cost - problem.cost.min()
    converged, it = False, 0
    if eps < LOG_DOMAIN_BELOW:
        plan, converged, it = _log_domain_scaled(cost, a, b, eps, problem.max_iters, problem.tol)
    else:
        kernel = np.exp(-cost / eps)
        v = np.ones_like(b)
        for it in range(1, problem.max_iters + 1):
            u = a / (kernel @ v)
            v = b / (kernel.T @ u)
            plan = u[:, None] * kernel * v[None, :]
            rr, cr = _residuals(plan, a, b)
            if rr < problem.tol and cr < problem.tol:
                converged = True
                break
    plan = plan / plan.sum()
    rr, cr = _residuals(plan, a, b)
    return TransportPlan(plan, converged, it, rr, cr)


def row_targets(plan: TransportPlan | np.ndarray) -> np.ndarray:
    """Per-sample distributions over actors: each plan row divided by its mass."""
    p = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    return p / p.sum(axis=1, keepdims=True)


def capacity_counts(n: int, weights: np.ndarray) -> np.ndarray:
    """Integer per-actor counts summing to ``n``, as close to ``n * weights`` as possible."""
    raw = n * np.asarray(weights, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    for j in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[j] += 1
    return counts


def round_plan(plan: TransportPlan | np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Hard assignment by row argmax, then capacity repair.

    Over-full actors give up their least confident samples (lowest plan
    fraction) to the under-full actor each such sample prefers most.
    """
    frac = row_targets(plan)
    n, k = frac.shape
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != n:
        raise ContractError("counts must sum to the number of samples")
    assign = frac.argmax(axis=1)
    while True:
        load = np.bincount(assign, minlength=k)
        over = np.where(load > counts)[0]
        if len(over) == 0:
            break
        under = np.where(load < counts)[0]
        j = over[0]
        members = np.where(assign == j)[0]
        i = members[np.argmin(frac[members, j])]
        assign[i] = under[np.argmax(frac[i, under])]
    hard = np.zeros((n, k))
    hard[np.arange(n), assign] = 1.0
    return hard


def exact_assignment_oracle(cost: np.ndarray, counts) -> tuple[np.ndarray, float]:
    """Minimum-cost hard assignment with exactly ``counts[j]`` samples per actor, by enumeration."""
    cost = np.asarray(cost, dtype=np.float64)
    n, k = cost.shape
    counts = tuple(int(c) for c in counts)
    if n > ORACLE_MAX_N:
        raise ContractError(f"oracle enumerates at most {ORACLE_MAX_N} samples, got {n}")
    if len(counts) != k or sum(counts) != n or min(counts) < 0:
        raise ContractError("counts must be k non-negative integers summing to N")
    best, best_cost = None, np.inf
    rows = np.arange(n)
    for assign in itertools.product(range(k), repeat=n):
        if tuple(np.bincount(assign, minlength=k)) != counts:
            continue
        c = float(cost[rows, assign].sum())
        if c < best_cost:
            best, best_cost = assign, c
    hard = np.zeros((n, k))
    hard[rows, best] = 1.0
    return hard, best_cost
