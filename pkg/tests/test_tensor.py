import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rxeend import tensor as tn
from rxeend.tensor import Tape, Tensor


@pytest.fixture(autouse=True)
def double():
    with tn.precision(np.float64):
        yield


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    M = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(tn.matmul(Tensor(np.eye(3)), Tensor(M)).data, M)


def test_matmul_hand_case():
    out = tn.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.data.tolist() == [[3], [7]]


def test_matmul_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(tn.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_rules():
    rng = np.random.default_rng(0)
    a = tn.parameter(rng.normal(size=(3, 4)))
    b = tn.parameter(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    with Tape() as tape:
        loss = tn.sum_all(tn.mul_const(tn.matmul(a, b), g))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_layer_norm_constant_row():
    out = tn.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_row_statistics():
    x = np.array([[1.0, 2.0, 3.0]])
    out = tn.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12).data
    mu = sum(x[0]) / 3
    var = sum((v - mu) ** 2 for v in x[0]) / 3
    expected = [(v - mu) / math.sqrt(var + 1e-12) for v in x[0]]
    np.testing.assert_allclose(out[0], expected, atol=1e-9)
    assert abs(out.mean()) < 1e-12 and abs(out.var() - 1) < 1e-9


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([0.5, -1.0, 2.0])
    out = tn.layer_norm(Tensor(np.random.default_rng(1).normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(bias))
    assert np.array_equal(out.data, np.tile(bias, (4, 1)))


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(tn.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])
    big = tn.softmax_rows(Tensor([[1000.0, 0.0, 0.0]])).data
    assert np.all(np.isfinite(big)) and abs(big[0, 0] - 1) < 1e-12


def test_softmax_against_formula():
    row = np.random.default_rng(5).normal(size=7)
    expected = [math.exp(v) / sum(math.exp(u) for u in row) for v in row]
    np.testing.assert_allclose(tn.softmax_rows(Tensor(row[None])).data[0], expected, rtol=1e-12)


def test_sigmoid_values_and_clamp():
    assert tn.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert tn.sigmoid(Tensor([-1000.0])).data[0] == tn.SIGMOID_EPS
    assert tn.sigmoid(Tensor([1000.0])).data[0] == 1 - tn.SIGMOID_EPS
    assert abs(tn.sigmoid(Tensor([1.0])).data[0] - 1 / (1 + math.exp(-1))) < 1e-15


def test_structural_ops():
    assert tn.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    a = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(tn.add(a, Tensor(np.zeros((2, 3)))).data, a.data)
    v = Tensor(np.arange(23.0)[None])
    assert tn.concat_cols([v] * 15).shape == (1, 345)


def test_backward_sum_gives_ones():
    x = tn.parameter(np.random.default_rng(2).normal(size=(3, 4)))
    with Tape() as tape:
        loss = tn.sum_all(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_sigmoid_closed_form():
    w = tn.parameter([[0.7]])
    x = np.array([[1.3]])
    with Tape() as tape:
        y = tn.sigmoid(tn.matmul(Tensor(x), w))
        loss = tn.sum_all(y)
    tape.backward(loss)
    s = 1 / (1 + math.exp(-0.7 * 1.3))
    assert abs(w.grad[0, 0] - s * (1 - s) * 1.3) < 1e-14


def test_backward_twice_is_error():
    x = tn.parameter([1.0, 2.0])
    with Tape() as tape:
        loss = tn.sum_all(x)
    tape.backward(loss)
    with pytest.raises(tn.ContractError):
        tape.backward(loss)


def test_backward_non_scalar_is_error():
    x = tn.parameter([1.0, 2.0])
    with Tape() as tape:
        y = tn.scale(x, 2.0)
    with pytest.raises(tn.ContractError):
        tape.backward(y)


def test_grad_check_quadratic():
    x = Tensor(np.random.default_rng(0).normal(size=6))
    err = tn.grad_check(lambda t: tn.sum_all(tn.matmul(tn.reshape(t, (1, 6)), tn.reshape(t, (6, 1)))), x)
    assert err < 1e-9


OPS = {
    "matmul": lambda x: tn.sum_all(tn.mul_const(tn.matmul(x, Tensor(np.linspace(-1, 1, 12).reshape(4, 3))),
                                               np.linspace(0.5, 2, 9).reshape(3, 3))),
    "add_bias": lambda x: tn.sum_all(tn.mul_const(
        tn.add_bias(x, tn.reshape(tn.matmul(Tensor(np.ones((1, 3))), x), (4,))), np.arange(12.0).reshape(3, 4))),
    "add": lambda x: tn.sum_all(tn.mul_const(tn.add(x, tn.relu(x)), np.arange(12.0).reshape(3, 4))),
    "scale": lambda x: tn.sum_all(tn.mul_const(tn.scale(x, -1.7), np.arange(12.0).reshape(3, 4))),
    "reshape": lambda x: tn.sum_all(tn.mul_const(tn.reshape(x, (2, 6)), np.arange(12.0).reshape(2, 6))),
    "relu": lambda x: tn.sum_all(tn.mul_const(tn.relu(x), np.arange(12.0).reshape(3, 4))),
    "sigmoid": lambda x: tn.sum_all(tn.mul_const(tn.sigmoid(x), np.arange(12.0).reshape(3, 4))),
    "softmax": lambda x: tn.sum_all(tn.mul_const(tn.softmax_rows(x), np.arange(12.0).reshape(3, 4))),
    "layer_norm": lambda x: tn.sum_all(tn.mul_const(
        tn.layer_norm(x, Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.linspace(-1, 1, 4))),
        np.arange(12.0).reshape(3, 4))),
    "concat": lambda x: tn.sum_all(tn.mul_const(tn.concat_cols([x, tn.scale(x, 2.0)]),
                                                np.arange(24.0).reshape(3, 8))),
    "transpose": lambda x: tn.sum_all(tn.mul_const(tn.swap_last(x), np.arange(12.0).reshape(4, 3))),
    "mean": lambda x: tn.mean(tn.mul_const(x, np.arange(12.0).reshape(3, 4))),
    "bce": lambda x: tn.bce(tn.sigmoid(x), (np.arange(12).reshape(3, 4) % 2)),
    "sigmoid_bce": lambda x: tn.sigmoid_bce(x, (np.arange(12).reshape(3, 4) % 3 == 0), weight=0.3),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_grad_check_every_op(name):
    x = Tensor(np.random.default_rng(11).normal(size=(3, 4)))
    assert tn.grad_check(OPS[name], x) <= 1e-5


def test_layer_norm_gain_bias_grads():
    rng = np.random.default_rng(4)
    X = Tensor(rng.normal(size=(5, 4)))
    w = rng.normal(size=(5, 4))
    assert tn.grad_check(lambda g: tn.sum_all(tn.mul_const(tn.layer_norm(X, g, Tensor(np.zeros(4))), w)),
                         Tensor(rng.normal(size=4))) <= 1e-5
    assert tn.grad_check(lambda b: tn.sum_all(tn.mul_const(tn.layer_norm(X, Tensor(np.ones(4)), b), w)),
                         Tensor(rng.normal(size=4))) <= 1e-5


def test_batched_matmul_grads():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(2, 3, 4))
    W = rng.normal(size=(2, 3, 5))
    assert tn.grad_check(lambda b: tn.sum_all(tn.mul_const(tn.matmul(Tensor(A), b), W)),
                         Tensor(rng.normal(size=(2, 4, 5)))) <= 1e-5
    assert tn.grad_check(lambda b: tn.sum_all(tn.mul_const(tn.matmul(Tensor(A), b), W)),
                         Tensor(rng.normal(size=(4, 5)))) <= 1e-5


def test_gradient_linearity():
    rng = np.random.default_rng(21)
    w = tn.parameter(rng.normal(size=(4, 3)))
    X = Tensor(rng.normal(size=(6, 4)))
    y = (rng.random((6, 3)) > 0.5)

    def l1():
        return tn.bce(tn.sigmoid(tn.matmul(X, w)), y)

    def l2():
        return tn.sum_all(tn.relu(tn.matmul(X, w)))

    grads = []
    for f in (l1, l2, lambda: tn.add_scalars([l1(), l2()])):
        w.grad = None
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        grads.append(w.grad.copy())
    np.testing.assert_allclose(grads[2], grads[0] + grads[1], atol=1e-10, rtol=0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_finite_outputs_and_ranges(x):
    t = Tensor(x)
    s = tn.softmax_rows(t).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    sg = tn.sigmoid(t).data
    assert sg.min() >= tn.SIGMOID_EPS and sg.max() <= 1 - tn.SIGMOID_EPS
    ln = tn.layer_norm(t, Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    assert np.all(np.isfinite(ln))


def test_no_tape_means_no_graph():
    x = tn.parameter([1.0, 2.0])
    y = tn.scale(x, 3.0)
    assert not y.requires_grad


def test_precision_switch():
    assert Tensor([1.0]).data.dtype == np.float64
    with tn.precision(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
