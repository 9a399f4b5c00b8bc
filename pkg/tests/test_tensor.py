import numpy as np
import pytest

from mixture_trader import tensor as T
from mixture_trader.errors import ContractError, ShapeError
from mixture_trader.tensor import Tape, Tensor

from oracles import numerical_grad

RTOL = 1e-4


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


def leaf(rng, shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def check(fn, inputs, weight_rng):
    """Compare tape gradients of sum(w * fn(inputs)) with central differences."""
    out_shape = fn(*inputs).shape
    w = weight_rng.standard_normal(out_shape)
    loss_fn = lambda: float(np.sum(w * fn(*inputs).data))
    with Tape() as tape:
        loss = (fn(*inputs) * w).sum()
    tape.backward(loss)
    for x in inputs:
        num = numerical_grad(loss_fn, x.data)
        assert rel_err(x.grad, num) < RTOL


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)], False),
    "div": (lambda a, b: a / b, [(3, 4), (1, 4)], True),
    "minimum": (T.minimum, [(5,), (5,)], False),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)], False),
    "neg": (lambda a: -a, [(3,)], False),
    "tanh": (T.tanh, [(3, 2)], False),
    "sigmoid": (T.sigmoid, [(3, 2)], False),
    "relu": (T.relu, [(6,)], False),
    "exp": (T.exp, [(4,)], False),
    "log": (T.log, [(4,)], True),
    "square": (T.square, [(4,)], False),
    "clip": (lambda a: T.clip(a, -0.5, 0.5), [(8,)], False),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4)], False),
    "mean": (lambda a: a.mean(axis=0, keepdims=True), [(3, 4)], False),
    "getitem": (lambda a: a[np.array([0, 2, 2])], [(4, 3)], False),
    "pick": (lambda a: T.pick(a, np.array([1, 0, 1])), [(3, 2)], False),
    "reshape": (lambda a: a.reshape(2, 6), [(3, 4)], False),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], False),
    "stack": (lambda a, b: T.stack([a, b], axis=1), [(2, 3), (2, 3)], False),
    "softmax": (T.softmax, [(3, 4)], False),
    "log_softmax": (T.log_softmax, [(3, 4)], False),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradient_matches_finite_differences(name, seed):
    fn, shapes, positive = OPS[name]
    rng = np.random.default_rng([seed, len(name)])
    inputs = [leaf(rng, s, positive) for s in shapes]
    if name in ("relu", "clip", "minimum"):
        # keep inputs away from the kinks where the derivative is undefined
        for x in inputs:
            x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)
            x.data = np.where(np.abs(np.abs(x.data) - 0.5) < 0.05, 0.3, x.data)
    check(fn, inputs, rng)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2).sum()
    assert not y.requires_grad
    with Tape() as tape:
        z = Tensor(np.ones(3)) * 2  # no input needs a gradient
    assert tape.nodes == [] and not z.requires_grad


def test_backward_contracts():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ContractError, match="scalar"):
        tape.backward(y)
    with pytest.raises(ContractError, match="not produced"):
        tape.backward(Tensor(1.0))


def test_gradients_accumulate_on_shared_leaf():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum() + (x * 3).sum()
    tape.backward(loss)
    assert np.allclose(x.grad, 2 * x.data + 3)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 5)))


def test_tapes_nest_lifo():
    outer = Tape()
    inner = Tape()
    outer.__enter__()
    inner.__enter__()
    with pytest.raises(ContractError):
        outer.__exit__(None, None, None)
    inner.__exit__(None, None, None)
    outer.__exit__(None, None, None)
