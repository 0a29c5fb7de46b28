import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltcmh.errors import FormatError, ShapeError, TrainingError
from ltcmh.tensor import (ACTIVATIONS, FeedForwardNet, LayerSpec, _activate,
                          _activate_grad, finite_diff_grad, load_net, read_net,
                          save_net, sgd_step, sigmoid, softplus, write_net)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float((np.abs(a - b) / (1e-8 + np.abs(a) + np.abs(b))).max())


# --- scalar functions ---------------------------------------------------------

def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert np.isclose(sigmoid(np.log(3)), 0.75)


def test_softplus_matches_naive_at_moderate_inputs(rng):
    x = rng.uniform(-20, 20, size=100)
    assert np.allclose(softplus(x), np.log1p(np.exp(x)), atol=1e-12)


@pytest.mark.parametrize("x", [-1e4, -100.0, 0.0, 100.0, 1e4])
def test_sigmoid_softplus_stable_at_extremes(x):
    assert np.isfinite(sigmoid(x))
    assert np.isfinite(softplus(x))
    if x == 1e4:
        # softplus(x) -> x for large x
        assert np.isclose(softplus(x), x)
    if x == -1e4:
        assert softplus(x) >= 0.0


def test_activation_grads_match_finite_differences(rng):
    eps = 1e-6
    for name in ACTIVATIONS:
        x = rng.uniform(-4, 4, size=100)
        if name == "relu":
            x = x[np.abs(x) > 1e-3]   # away from the kink
        a = _activate(name, x)
        analytic = _activate_grad(name, x, a)
        numeric = (_activate(name, x + eps) - _activate(name, x - eps)) / (2 * eps)
        assert rel_err(analytic, numeric) < 1e-6


# --- forward ------------------------------------------------------------------

def test_forward_identity_layer_is_identity(rng):
    net = FeedForwardNet([LayerSpec(3, 3, "identity")], rng)
    net.weights[0][:] = np.eye(3)
    net.biases[0][:] = 0.0
    v = np.array([[1.0, -2.0, 0.5]])
    out, _ = net.forward(v)
    assert np.array_equal(out, v)


def test_forward_sigmoid_unit_zero_weight_gives_half(rng):
    net = FeedForwardNet([LayerSpec(4, 1, "sigmoid")], rng)
    net.weights[0][:] = 0.0
    net.biases[0][:] = 0.0
    out, _ = net.forward(rng.normal(size=(5, 4)))
    assert np.allclose(out, 0.5)


def test_forward_matches_scalar_loop_oracle(rng):
    net = FeedForwardNet([LayerSpec(3, 4, "tanh"), LayerSpec(4, 2, "sigmoid")], rng)
    batch = rng.normal(size=(5, 3))
    out, _ = net.forward(batch)
    # hand-rolled forward with explicit scalar loops
    expect = np.zeros((5, 2))
    for s in range(5):
        h = np.zeros(4)
        for j in range(4):
            acc = net.biases[0][j]
            for i in range(3):
                acc += net.weights[0][j, i] * batch[s, i]
            h[j] = np.tanh(acc)
        for j in range(2):
            acc = net.biases[1][j]
            for i in range(4):
                acc += net.weights[1][j, i] * h[i]
            expect[s, j] = 1.0 / (1.0 + np.exp(-acc))
    assert np.allclose(out, expect, atol=1e-12)


def test_forward_shape_mismatch_raises(rng):
    net = FeedForwardNet([LayerSpec(3, 2)], rng)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((4, 5)))


def test_layer_chain_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        FeedForwardNet([LayerSpec(3, 4), LayerSpec(5, 2)], rng)


def test_glorot_init_bounds_and_determinism():
    net1 = FeedForwardNet([LayerSpec(10, 20)], np.random.default_rng(7))
    net2 = FeedForwardNet([LayerSpec(10, 20)], np.random.default_rng(7))
    limit = np.sqrt(6.0 / 30.0)
    assert np.abs(net1.weights[0]).max() <= limit
    assert np.array_equal(net1.weights[0], net2.weights[0])
    assert np.all(net1.biases[0] == 0.0)


# --- backward -----------------------------------------------------------------

def test_backward_linear_net_weight_grad_is_input_sum(rng):
    net = FeedForwardNet([LayerSpec(3, 2, "identity")], rng)
    batch = rng.normal(size=(6, 3))
    out, cache = net.forward(batch)
    grads, _ = net.backward(cache, np.ones_like(out))
    dw, db = grads[0]
    assert np.allclose(dw, np.tile(batch.sum(axis=0), (2, 1)))
    assert np.allclose(db, [6.0, 6.0])


def test_backward_zero_output_grad_gives_zero_grads(rng):
    net = FeedForwardNet([LayerSpec(3, 4, "tanh"), LayerSpec(4, 2, "sigmoid")], rng)
    out, cache = net.forward(rng.normal(size=(5, 3)))
    grads, input_grad = net.backward(cache, np.zeros_like(out))
    for dw, db in grads:
        assert np.all(dw == 0.0) and np.all(db == 0.0)
    assert np.all(input_grad == 0.0)


def test_backward_matches_finite_differences(rng):
    net = FeedForwardNet([LayerSpec(4, 5, "tanh"), LayerSpec(5, 3, "sigmoid"),
                          LayerSpec(3, 2, "identity")], rng)
    batch = rng.normal(size=(6, 4))
    R = rng.normal(size=(6, 2))

    def loss_fn(n):
        out, _ = n.forward(batch)
        return float((R * out).sum())

    out, cache = net.forward(batch)
    analytic, _ = net.backward(cache, R)
    numeric = finite_diff_grad(loss_fn, net, 1e-6)
    for (adw, adb), (ndw, ndb) in zip(analytic, numeric):
        assert rel_err(adw, ndw) < 1e-5
        assert rel_err(adb, ndb) < 1e-5


def test_backward_input_grad_matches_finite_differences(rng):
    net = FeedForwardNet([LayerSpec(3, 4, "tanh"), LayerSpec(4, 2, "sigmoid")], rng)
    batch = rng.normal(size=(2, 3))
    R = rng.normal(size=(2, 2))
    out, cache = net.forward(batch)
    _, input_grad = net.backward(cache, R)
    eps = 1e-6
    numeric = np.zeros_like(batch)
    for idx in np.ndindex(batch.shape):
        b = batch.copy()
        b[idx] += eps
        hi = float((R * net.forward(b)[0]).sum())
        b[idx] -= 2 * eps
        lo = float((R * net.forward(b)[0]).sum())
        numeric[idx] = (hi - lo) / (2 * eps)
    assert rel_err(input_grad, numeric) < 1e-5


def test_backward_shape_mismatch_raises(rng):
    net = FeedForwardNet([LayerSpec(3, 2)], rng)
    _, cache = net.forward(rng.normal(size=(4, 3)))
    with pytest.raises(ShapeError):
        net.backward(cache, np.zeros((4, 3)))


# --- sgd_step -----------------------------------------------------------------

def test_sgd_step_zero_lr_is_invalid_but_zero_grad_keeps_params(rng):
    net = FeedForwardNet([LayerSpec(2, 2)], rng)
    before = net.weights[0].copy()
    sgd_step(net, [(np.zeros((2, 2)), np.zeros(2))], learning_rate=0.5)
    assert np.array_equal(net.weights[0], before)


def test_sgd_step_arithmetic(rng):
    net = FeedForwardNet([LayerSpec(1, 1)], rng)
    net.weights[0][:] = 1.0
    sgd_step(net, [(np.array([[2.0]]), np.zeros(1))], learning_rate=0.1)
    assert np.isclose(net.weights[0][0, 0], 0.8)


def test_sgd_step_nonfinite_grad_raises(rng):
    net = FeedForwardNet([LayerSpec(1, 1)], rng)
    with pytest.raises(TrainingError):
        sgd_step(net, [(np.array([[np.nan]]), np.zeros(1))], 0.1)


def test_sgd_on_convex_quadratic_decreases_monotonically(rng):
    # loss = ||W - T||^2 for a 2x2 linear layer
    net = FeedForwardNet([LayerSpec(2, 2)], rng)
    T = np.array([[1.0, -1.0], [0.5, 2.0]])
    losses = []
    for _ in range(20):
        losses.append(float(((net.weights[0] - T) ** 2).sum()))
        grad = 2.0 * (net.weights[0] - T)
        sgd_step(net, [(grad, np.zeros(2))], learning_rate=0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_sgd_momentum_accumulates(rng):
    net = FeedForwardNet([LayerSpec(1, 1)], rng)
    net.weights[0][:] = 0.0
    g = [(np.array([[1.0]]), np.zeros(1))]
    vel = sgd_step(net, g, 0.1, momentum=0.9)
    vel = sgd_step(net, g, 0.1, momentum=0.9, velocity=vel)
    # steps: 0.1*1 then 0.1*(0.9*1+1) = 0.29 total
    assert np.isclose(net.weights[0][0, 0], -0.29)


# --- finite_diff_grad -----------------------------------------------------------

def test_finite_diff_simple_quadratic(rng):
    net = FeedForwardNet([LayerSpec(1, 1)], rng)
    net.weights[0][:] = 3.0

    def loss_fn(n):
        return float(n.weights[0][0, 0] ** 2)

    grads = finite_diff_grad(loss_fn, net, 1e-6)
    assert np.isclose(grads[0][0][0, 0], 6.0, atol=1e-6)


def test_finite_diff_constant_loss_is_zero(rng):
    net = FeedForwardNet([LayerSpec(2, 2)], rng)
    grads = finite_diff_grad(lambda n: 1.0, net, 1e-6)
    for dw, db in grads:
        assert np.all(dw == 0.0) and np.all(db == 0.0)


def test_finite_diff_rejects_bad_eps(rng):
    net = FeedForwardNet([LayerSpec(1, 1)], rng)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda n: 0.0, net, 0.0)


# --- persistence ----------------------------------------------------------------

def test_net_save_load_roundtrip(tmp_path, rng):
    net = FeedForwardNet([LayerSpec(3, 4, "relu"), LayerSpec(4, 2, "sigmoid")], rng)
    path = tmp_path / "net.lcmh"
    save_net(path, net)
    loaded = load_net(path)
    assert [s.activation for s in loaded.specs] == ["relu", "sigmoid"]
    for w1, w2 in zip(net.weights, loaded.weights):
        assert np.array_equal(w1, w2)
    for b1, b2 in zip(net.biases, loaded.biases):
        assert np.array_equal(b1, b2)


def test_net_save_is_byte_deterministic(tmp_path, rng):
    net = FeedForwardNet([LayerSpec(2, 2)], rng)
    p1, p2 = tmp_path / "a", tmp_path / "b"
    save_net(p1, net)
    save_net(p2, net)
    assert p1.read_bytes() == p2.read_bytes()


def test_net_file_layout_matches_documentation(tmp_path, rng):
    net = FeedForwardNet([LayerSpec(2, 1, "tanh")], rng)
    path = tmp_path / "net.lcmh"
    save_net(path, net)
    raw = path.read_bytes()
    assert raw[:4] == b"LCMH"
    assert int.from_bytes(raw[4:8], "little") == 1          # format version
    assert int.from_bytes(raw[8:12], "little") == 1         # layer count
    assert int.from_bytes(raw[12:16], "little") == 2        # input_dim
    assert int.from_bytes(raw[16:20], "little") == 1        # output_dim
    assert raw[20] == ACTIVATIONS.index("tanh")
    params = np.frombuffer(raw[21:], dtype="<f8")
    assert np.array_equal(params[:2], net.weights[0].ravel())
    assert params[2] == net.biases[0][0]


def test_load_net_bad_magic_raises(tmp_path):
    path = tmp_path / "bad.lcmh"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_net(path)


def test_load_net_truncated_raises(tmp_path, rng):
    net = FeedForwardNet([LayerSpec(3, 3)], rng)
    path = tmp_path / "net.lcmh"
    save_net(path, net)
    (tmp_path / "trunc.lcmh").write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_net(tmp_path / "trunc.lcmh")


def test_read_net_bad_activation_tag_raises(rng):
    net = FeedForwardNet([LayerSpec(1, 1)], rng)
    buf = io.BytesIO()
    write_net(buf, net)
    raw = bytearray(buf.getvalue())
    raw[12] = 200   # activation tag byte of the first layer spec
    with pytest.raises(FormatError):
        read_net(io.BytesIO(bytes(raw)))


# --- properties -----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_deterministic_for_seed(seed):
    r1 = np.random.default_rng(seed)
    r2 = np.random.default_rng(seed)
    n1 = FeedForwardNet([LayerSpec(3, 2, "tanh")], r1)
    n2 = FeedForwardNet([LayerSpec(3, 2, "tanh")], r2)
    batch = np.random.default_rng(seed + 1).normal(size=(4, 3))
    assert np.array_equal(n1.forward(batch)[0], n2.forward(batch)[0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_no_nan_propagation(x):
    assert np.isfinite(sigmoid(x))
    assert np.isfinite(softplus(x))
