import numpy as np
import pytest

from mixture_trader.errors import ConfigError, DomainError, ShapeError
from mixture_trader.nn import (
    SGD, GruCell, Linear, Module, cross_entropy, cross_entropy_logits, gru_sequence, gumbel_softmax,
    load_checkpoint, sample_gumbel, save_checkpoint,
)
from mixture_trader.tensor import Tape, Tensor

from oracles import numerical_grad


def bptt_grad_check(seed, steps=5, batch=2, d_in=3, d_h=4):
    rng = np.random.default_rng(seed)
    cell = GruCell(d_in, d_h, rng)
    xs = [Tensor(rng.standard_normal((batch, d_in)), requires_grad=True) for _ in range(steps)]
    w = rng.standard_normal((steps, batch, d_h))

    def loss():
        hs = gru_sequence(cell, xs)
        total = Tensor(0.0)
        for t, h in enumerate(hs):
            total = total + (h * w[t]).sum()
        return total

    with Tape() as tape:
        value = loss()
    tape.backward(value)
    worst = 0.0
    for p in cell.parameters() + xs:
        num = numerical_grad(lambda: loss().item(), p.data)
        worst = max(worst, float(np.max(np.abs(p.grad - num) / np.maximum(1e-6, np.abs(p.grad) + np.abs(num)))))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_gru_bptt_matches_finite_differences(seed):
    assert bptt_grad_check(seed) < 1e-4


def test_gru_recurrence_by_hand():
    rng = np.random.default_rng(0)
    cell = GruCell(2, 3, rng)
    x = rng.standard_normal((1, 2))
    h = rng.standard_normal((1, 3))
    sig = lambda v: 1 / (1 + np.exp(-v))
    z = sig(x @ cell.W_z.data + h @ cell.U_z.data + cell.b_z.data)
    r = sig(x @ cell.W_r.data + h @ cell.U_r.data + cell.b_r.data)
    n = np.tanh(x @ cell.W_n.data + (r * h) @ cell.U_n.data + cell.b_n.data)
    expected = (1 - z) * h + z * n
    assert np.allclose(cell(Tensor(h), Tensor(x)).data, expected, atol=1e-14)


def test_gru_zero_params_zero_inputs_stay_zero():
    cell = GruCell(3, 4, np.random.default_rng(0))
    for p in cell.parameters():
        p.data = np.zeros_like(p.data)
    hs = gru_sequence(cell, [Tensor(np.zeros((2, 3)))] * 4)
    assert all(np.all(h.data == 0.0) for h in hs)
    assert gru_sequence(cell, []) == []


def test_gru_shape_errors():
    cell = GruCell(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cell(cell.initial_state(2), Tensor(np.zeros((2, 5))))
    with pytest.raises(ShapeError):
        cell(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 3))))


def test_gumbel_softmax_rows_and_temperature():
    logits = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]]))
    q = gumbel_softmax(logits, 1.0, noise=np.zeros((2, 3)))
    assert np.allclose(q.data.sum(axis=1), 1.0)
    assert np.allclose(q.data[1], 1 / 3)
    sharp = gumbel_softmax(logits, 0.05, noise=np.zeros((2, 3)))
    assert sharp.data[0, 1] > 0.99
    with pytest.raises(DomainError):
        gumbel_softmax(logits, 0.0)


def test_gumbel_noise_distribution():
    g = sample_gumbel(np.random.default_rng(0), 200_000)
    assert g.mean() == pytest.approx(np.euler_gamma, abs=0.01)
    assert np.all(np.isfinite(g))


def test_gumbel_argmax_frequencies_follow_softmax():
    rng = np.random.default_rng(3)
    logits = np.log(np.array([0.2, 0.5, 0.3]))
    wins = np.bincount(np.argmax(logits + sample_gumbel(rng, (50_000, 3)), axis=1), minlength=3) / 50_000
    assert np.allclose(wins, [0.2, 0.5, 0.3], atol=0.01)


def test_cross_entropy_values_and_domain():
    p = Tensor(np.array([[0.25, 0.75], [0.5, 0.5]]))
    assert cross_entropy(p, np.array([1, 0])).item() == pytest.approx(-(np.log(0.75) + np.log(0.5)) / 2)
    assert cross_entropy(p, np.array([[0.0, 1.0], [1.0, 0.0]])).item() == pytest.approx(
        cross_entropy(p, np.array([1, 0])).item())
    with pytest.raises(DomainError):
        cross_entropy(Tensor(np.array([[0.2, 0.2]])), np.array([0]))
    with pytest.raises(DomainError):
        cross_entropy(p, np.array([2, 0]))
    z = Tensor(np.log(np.array([[0.25, 0.75], [0.5, 0.5]])))
    assert cross_entropy_logits(z, np.array([1, 0])).item() == pytest.approx(
        cross_entropy(p, np.array([1, 0])).item())


def test_sgd_momentum_clipping_and_zero_lr():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([w], lr=0.0, momentum=0.9, max_grad_norm=1.0)
    w.grad = np.array([3.0, 4.0])
    before = w.data.copy()
    assert opt.step() == pytest.approx(5.0)
    assert np.array_equal(w.data, before)
    opt = SGD([w], lr=0.1, momentum=0.5, max_grad_norm=1.0)
    w.grad = np.array([3.0, 4.0])
    opt.step()
    assert np.allclose(w.data, before - 0.1 * np.array([0.6, 0.8]))
    w.grad = np.array([0.0, 0.0])
    opt.step()
    assert np.allclose(w.data, before - 0.1 * np.array([0.6, 0.8]) * 1.5)
    with pytest.raises(ConfigError):
        SGD([w], lr=-1.0)


class Pair(Module):
    def __init__(self, rng):
        self.first = Linear(2, 3, rng)
        self.rest = [Linear(3, 1, rng)]


def test_checkpoint_round_trip(tmp_path):
    net = Pair(np.random.default_rng(0))
    names = [n for n, _ in net.named_parameters()]
    assert names == ["first.W", "first.b", "rest.0.W", "rest.0.b"]
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, net.state_dict(), {"kind": "test"})
    params, meta = load_checkpoint(path)
    other = Pair(np.random.default_rng(1))
    other.load_state_dict(params)
    assert meta == {"kind": "test"}
    for (_, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
        assert np.array_equal(a.data, b.data)
    bad = dict(params)
    bad["first.W"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        other.load_state_dict(bad)
    del bad["first.W"]
    with pytest.raises(ConfigError):
        other.load_state_dict(bad)


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ConfigError):
        load_checkpoint(p)
