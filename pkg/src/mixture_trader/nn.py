"""Neural building blocks on top of :mod:`mixture_trader.tensor`."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor, _make, _sigmoid, as_tensor, log, log_softmax, pick, softmax

CHECKPOINT_FORMAT = "mixture-trader-params"
CHECKPOINT_VERSION = 1


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container; parameters are discovered in attribute definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.W = _param(uniform_init(rng, (in_dim, out_dim), in_dim), "W")
        self.b = _param(uniform_init(rng, (out_dim,), in_dim), "b")

    def __call__(self, x: Tensor) -> Tensor:
        return as_tensor(x) @ self.W + self.b


class GruCell(Module):
    """Weights for the update (z), reset (r) and candidate (n) gates."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        for gate in "zrn":
            setattr(self, f"W_{gate}", _param(uniform_init(rng, (input_dim, hidden_dim), input_dim), f"W_{gate}"))
            setattr(self, f"U_{gate}", _param(uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim), f"U_{gate}"))
            setattr(self, f"b_{gate}", _param(uniform_init(rng, (hidden_dim,), hidden_dim), f"b_{gate}"))

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_dim)))

    def __call__(self, h_prev: Tensor, x: Tensor) -> Tensor:
        return gru_step(self, h_prev, x)


def gru_step(params: GruCell, h_prev: Tensor, x: Tensor) -> Tensor:
    """h = (1 - z) * h_prev + z * n for a batch of rows."""
    h_prev, x = as_tensor(h_prev), as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"GRU input must be (batch, {params.input_dim}), got {x.shape}")
    if h_prev.shape != (x.shape[0], params.hidden_dim):
        raise ShapeError(f"GRU hidden must be ({x.shape[0]}, {params.hidden_dim}), got {h_prev.shape}")
    w = [getattr(params, f"{kind}_{gate}") for gate in "zrn" for kind in "WUb"]
    (wz, uz, bz, wr, ur, br, wn, un, bn) = (t.data for t in w)
    hp, xd = h_prev.data, x.data
    z = _sigmoid(xd @ wz + hp @ uz + bz)
    r = _sigmoid(xd @ wr + hp @ ur + br)
    rh = r * hp
    n = np.tanh(xd @ wn + rh @ un + bn)
    h = hp + z * (n - hp)

    def backward(g):
        dan = g * z * (1.0 - n * n)
        daz = g * (n - hp) * z * (1.0 - z)
        drh = dan @ un.T
        dar = drh * hp * r * (1.0 - r)
        dh = g * (1.0 - z) + drh * r + daz @ uz.T + dar @ ur.T
        dx = daz @ wz.T + dar @ wr.T + dan @ wn.T
        return (dh, dx,
                xd.T @ daz, hp.T @ daz, daz.sum(axis=0),
                xd.T @ dar, hp.T @ dar, dar.sum(axis=0),
                xd.T @ dan, rh.T @ dan, dan.sum(axis=0))

    # one fused node per step keeps the tape short during BPTT
    return _make(h, (h_prev, x, *w), backward)


def gru_sequence(params: GruCell, xs: Sequence, h0: Tensor | None = None) -> list[Tensor]:
    """Hidden states for each step; ``h0`` defaults to zeros."""
    if len(xs) == 0:
        return []
    h = params.initial_state(as_tensor(xs[0]).shape[0]) if h0 is None else h0
    out = []
    for x in xs:
        h = gru_step(params, h, x)
        out.append(h)
    return out


# -------------------------------------------------------------- distributions


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau: float = 1.0, noise: np.ndarray | None = None,
                   rng: np.random.Generator | None = None) -> Tensor:
    """softmax((logits + g) / tau); pass ``noise`` explicitly (zeros disable it) or an ``rng``."""
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    if noise is None:
        noise = np.zeros(logits.shape) if rng is None else sample_gumbel(rng, logits.shape)
    return softmax((logits + noise) * (1.0 / tau), axis=-1)


def _targets(target, n_classes: int) -> tuple[np.ndarray | None, np.ndarray | None]:
    t = np.asarray(target)
    if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
        if t.size and (t.min() < 0 or t.max() >= n_classes):
            raise DomainError("class index out of range")
        return t.astype(np.int64), None
    return None, t.astype(np.float64)


def cross_entropy(pred_probs, target) -> Tensor:
    """Mean over rows of -sum(target * log(pred)); ``target`` is class indices or one-hot rows."""
    p = as_tensor(pred_probs)
    if p.ndim == 1:
        p = p.reshape(1, -1)
        target = np.atleast_1d(target) if np.ndim(target) == 0 else np.asarray(target).reshape(1, -1)
    d = p.data
    if np.any(d <= 0.0) or np.any(d > 1.0) or np.any(np.abs(d.sum(axis=1) - 1.0) > 1e-6):
        raise DomainError("pred_probs rows must lie in (0, 1] and sum to 1")
    idx, soft = _targets(target, d.shape[1])
    if idx is not None:
        return -(log(pick(p, idx)).mean())
    if soft.shape != d.shape:
        raise ShapeError(f"target shape {soft.shape} != pred shape {d.shape}")
    return -((log(p) * soft).sum(axis=1).mean())


def cross_entropy_logits(logits, target) -> Tensor:
    """Cross-entropy of softmax(logits), computed through log-softmax."""
    z = as_tensor(logits)
    idx, soft = _targets(target, z.shape[-1])
    lp = log_softmax(z, axis=-1)
    if idx is not None:
        return -(pick(lp, idx).mean())
    return -((lp * soft).sum(axis=1).mean())


# ------------------------------------------------------------------ optimizer


class SGD:
    """Gradient descent with momentum and optional global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 max_grad_norm: float | None = None):
        if lr < 0 or not 0 <= momentum < 1:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        self.params = list(params)
        self.lr, self.momentum, self.max_grad_norm = lr, momentum, max_grad_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None))

    def step(self) -> float:
        norm = self.grad_norm()
        if self.lr == 0.0:
            return norm
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.velocity[i] = self.momentum * self.velocity[i] + scale * p.grad
            p.data = p.data - self.lr * self.velocity[i]
        return norm


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write parameters as JSON: a shape table plus row-major values per tensor."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [
            {"name": name, "shape": list(arr.shape), "values": [float(v) for v in np.asarray(arr).reshape(-1)]}
            for name, arr in params.items()
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    params = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ShapeError(f"{entry['name']}: {values.size} values for shape {shape}")
        params[entry["name"]] = values.reshape(shape)
    return params, doc.get("meta", {})
