import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rel_err
from svmax_lab.errors import FormatError, ShapeError, StaleCache, TruncatedFile
from svmax_lab.net import (Conv2D, Flatten, L2NormalizeRows, Linear, Network, ReLU, SgdState, Tanh,
                           load_checkpoint, mlp, save_checkpoint, sgd_step)
from svmax_lab.rng import Rng


def probe_grads(net, x, probe):
    """Analytic and central-difference gradients of sum(probe * net(x)) w.r.t. every parameter."""
    net.forward(x)
    analytic = net.backward(probe)
    numeric = []
    for p in net.parameters():
        g = np.empty_like(p)
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + 1e-5
            up = np.sum(probe * net.forward(x))
            p[idx] = old - 1e-5
            down = np.sum(probe * net.forward(x))
            p[idx] = old
            g[idx] = (up - down) / 2e-5
        numeric.append(g)
    return analytic, numeric


def test_identity_linear():
    lin = Linear(3, 3)
    lin.weight[...] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(Network([lin]).forward(x), x)


def test_linear_then_normalize():
    lin = Linear(2, 2)
    lin.weight[...] = np.eye(2)
    out = Network([lin, L2NormalizeRows()]).forward([[3.0, 4.0]])
    np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)


def test_forward_matches_straight_line_evaluation():
    net = mlp([5, 7, 3], "tanh", normalize=True, rng=Rng(2))
    x = Rng(3).normal(size=(4, 5))
    l1, l2 = net.layers[0], net.layers[2]
    h = np.tanh(x @ l1.weight + l1.bias) @ l2.weight + l2.bias
    expected = h / np.linalg.norm(h, axis=1, keepdims=True)
    np.testing.assert_array_equal(net.forward(x), expected)


def test_normalized_output_unit_rows():
    net = mlp([6, 8, 4], normalize=True, rng=Rng(4))
    out = net.forward(Rng(5).normal(size=(10, 6)))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_shape_mismatch():
    net = mlp([3, 2])
    with pytest.raises(ShapeError):
        net.forward(np.ones((2, 4)))
    with pytest.raises(ShapeError):
        Network([Linear(3, 4), Linear(5, 2)])
    with pytest.raises(ShapeError):
        Network([ReLU()])
    with pytest.raises(ShapeError):
        Network([Conv2D(1, 2, 3, 1, (5, 5))])


def test_backward_before_forward():
    net = mlp([3, 2])
    with pytest.raises(StaleCache):
        net.backward(np.ones((1, 2)))


def test_backward_after_update_is_stale():
    net = mlp([3, 2])
    net.forward(np.ones((1, 3)))
    grads = net.backward(np.ones((1, 2)))
    sgd_step(SgdState(0.1, 10), net, grads, 0)
    with pytest.raises(StaleCache):
        net.backward(np.ones((1, 2)))


def test_linear_sum_loss_gradient():
    lin = Linear(3, 2, Rng(1))
    x = Rng(2).normal(size=(5, 3))
    net = Network([lin])
    net.forward(x)
    dw, db = net.backward(np.ones((5, 2)))
    np.testing.assert_allclose(dw, x.T @ np.ones((5, 2)), atol=1e-15)
    np.testing.assert_allclose(db, [5.0, 5.0])


def test_normalize_backward_example():
    layer = L2NormalizeRows()
    layer.forward(np.array([[3.0, 4.0]]))
    g, _ = layer.backward(np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(g, [[0.128, -0.096]], atol=1e-15)


def test_normalize_scale_invariance():
    x = Rng(6).normal(size=(5, 4))
    scale = np.array([[0.5], [2.0], [10.0], [1e-3], [7.0]])
    np.testing.assert_allclose(L2NormalizeRows().forward(x * scale), L2NormalizeRows().forward(x), atol=1e-12)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_three_layer_gradient_check(activation):
    net = mlp([4, 6, 5, 3], activation, normalize=True, rng=Rng(7))
    x = Rng(8).normal(size=(6, 4))
    probe = Rng(9).normal(size=(6, 3))
    analytic, numeric = probe_grads(net, x, probe)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) <= 1e-4


def test_conv_gradient_check():
    rng = Rng(10)
    net = Network([Conv2D(1, 2, 3, 2, (7, 7), rng), Tanh(), Flatten(), Linear(18, 3, rng), L2NormalizeRows()])
    x = Rng(11).normal(size=(3, 49))
    probe = Rng(12).normal(size=(3, 3))
    analytic, numeric = probe_grads(net, x, probe)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) <= 1e-4


def test_conv_input_gradient():
    conv = Conv2D(2, 3, 3, 1, (5, 5), Rng(13))
    net = Network([conv, ReLU(), Flatten()])
    x = Rng(14).normal(size=(2, 50))
    probe = Rng(15).normal(size=(2, net.output_dim))
    net.forward(x)
    net.backward(probe)
    numeric = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-6
        xm[idx] -= 1e-6
        numeric[idx] = (np.sum(probe * net.forward(xp)) - np.sum(probe * net.forward(xm))) / 2e-6
    assert rel_err(net.input_grad.reshape(x.shape), numeric) <= 1e-6


def test_conv_matches_direct_convolution():
    conv = Conv2D(1, 1, 2, 1, (3, 3))
    conv.weight[...] = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    x = np.arange(9.0).reshape(1, 9)
    out = conv.forward(x)
    np.testing.assert_array_equal(out[0, 0], [[27.0, 37.0], [57.0, 67.0]])


def test_glorot_init_range():
    lin = Linear(30, 20, Rng(16))
    limit = np.sqrt(6 / 50)
    assert np.all(np.abs(lin.weight) <= limit) and np.all(lin.bias == 0)


def test_lr_schedule():
    s = SgdState(0.01, 1000)
    assert s.learning_rate(0) == 0.01
    assert s.learning_rate(500) == 0.01
    assert s.learning_rate(1000) == pytest.approx(1e-7, abs=1e-20)
    assert s.learning_rate(750) == pytest.approx(0.005 + 5e-8, rel=1e-12)
    assert SgdState(0.025, 10, 0.0, decay=False).learning_rate(9) == 0.025


def test_sgd_state_validation():
    with pytest.raises(ValueError):
        SgdState(0.01, 100, momentum=1.0)
    with pytest.raises(ValueError):
        SgdState(1e-8, 100)
    with pytest.raises(ValueError):
        sgd_step(SgdState(0.1, 5), mlp([2, 1]), [], 5)


def test_zero_momentum_is_plain_gradient_descent():
    net = mlp([3, 2], rng=Rng(17))
    before = [p.copy() for p in net.parameters()]
    net.forward(np.ones((2, 3)))
    grads = net.backward(np.ones((2, 2)))
    sgd_step(SgdState(0.1, 10, 0.0), net, grads, 0)
    for p, b, g in zip(net.parameters(), before, grads):
        np.testing.assert_array_equal(p, b + (0.0 - 0.1 * g))


def test_momentum_accumulates():
    net = mlp([1, 1], rng=Rng(18))
    state = SgdState(0.1, 10, 0.9)
    w0 = net.parameters()[0].copy()
    for it in range(2):
        net.forward(np.ones((1, 1)))
        sgd_step(state, net, [np.ones((1, 1)), np.zeros(1)], it)
    np.testing.assert_allclose(net.parameters()[0], w0 - 0.1 - (0.09 + 0.1))


def train_steps(seed):
    net = mlp([4, 5, 2], rng=Rng(seed))
    state = SgdState(0.05, 20)
    data = Rng(seed + 1)
    for it in range(20):
        x = data.normal(size=(8, 4))
        net.forward(x)
        sgd_step(state, net, net.backward(np.ones((8, 2))), it)
    return net.parameters()


def test_deterministic_trajectory():
    for a, b in zip(train_steps(3), train_steps(3)):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_round_trip(tmp_path):
    rng = Rng(19)
    net = Network([Conv2D(1, 2, 3, 1, (6, 6), rng), ReLU(), Flatten(), Linear(32, 4, rng), Tanh(),
                   Linear(4, 2, rng), L2NormalizeRows()])
    path = tmp_path / "ck"
    save_checkpoint(net, path)
    buf = path.read_bytes()
    assert buf[:4] == b"SVMX" and struct.unpack("<II", buf[4:12]) == (1, 7)
    back = load_checkpoint(path)
    x = Rng(20).normal(size=(3, 36))
    np.testing.assert_array_equal(back.forward(x), net.forward(x))
    assert repr(back) == repr(net)


def test_checkpoint_errors(tmp_path):
    net = mlp([3, 2])
    path = tmp_path / "ck"
    save_checkpoint(net, path)
    buf = path.read_bytes()
    for name, data, err in [("magic", b"XXXX" + buf[4:], FormatError),
                            ("version", buf[:4] + struct.pack("<I", 2) + buf[8:], FormatError),
                            ("truncated", buf[:-3], TruncatedFile),
                            ("trailing", buf + b"\0", FormatError),
                            ("tag", buf[:12] + struct.pack("<I", 99) + buf[16:], FormatError)]:
        bad = tmp_path / name
        bad.write_bytes(data)
        with pytest.raises(err):
            load_checkpoint(bad)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(1, 5), st.integers(0, 2**31))
def test_mlp_output_shape(widths, batch, seed):
    net = mlp(widths, rng=Rng(seed))
    out = net.forward(Rng(seed).normal(size=(batch, widths[0])))
    assert out.shape == (batch, widths[-1])
    assert net.param_count == sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
