import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drowsybrake import nn


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def numeric_grads(params, loss_fn, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p.value)
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p.value[i]
            p.value[i] = old + h
            up = loss_fn()
            p.value[i] = old - h
            down = loss_fn()
            p.value[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_model(model, x, y, loss="mse", l2=0.0):
    def loss_fn():
        out = model.forward(x)
        val, _ = nn.LOSSES[loss](out, y)
        return val + nn.l2_penalty(model.parameters(), l2, accumulate=False)

    model.zero_grad()
    out = model.forward(x)
    _, dout = nn.LOSSES[loss](out, y)
    nn.l2_penalty(model.parameters(), l2)
    dx = model.backward(dout)
    analytic = [p.grad.copy() for p in model.parameters()]
    numeric = numeric_grads(model.parameters(), loss_fn)
    for p, a, n in zip(model.parameters(), analytic, numeric):
        assert rel_error(a, n) < 1e-4, p.name
    return dx


# -- forward examples -----------------------------------------------------------

def test_dense_identity():
    d = nn.Dense(3, 3)
    d.W.value[...] = np.eye(3)
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(nn.dense_forward(d, x), x)


def test_dense_relu_negative():
    d = nn.Dense(2, 3, "relu")
    d.W.value[...] = -1.0
    d.b.value[...] = -0.5
    assert np.all(nn.dense_forward(d, np.ones((5, 2))) == 0.0)


def test_dense_hand_product():
    d = nn.Dense(2, 2)
    d.W.value[...] = [[1, 0], [0, 1]]
    d.b.value[...] = [1, 1]
    np.testing.assert_array_equal(nn.dense_forward(d, [[1.0, 2.0]]), [[2.0, 3.0]])


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        nn.Dense(3, 2).forward(np.ones((1, 4)))


def test_rnn_zero_weights():
    cell = nn.Recurrent(3, 4)
    for p in cell.parameters():
        p.value[...] = 0.0
    h = nn.rnn_forward([cell], np.ones((5, 3)))
    assert np.all(h == 0.0)


def test_rnn_single_step():
    rng = np.random.default_rng(1)
    cell = nn.Recurrent(2, 3, rng)
    x = rng.standard_normal((1, 2))
    expected = np.tanh(x[0] @ cell.W_in.value + cell.b.value)
    np.testing.assert_allclose(nn.rnn_forward([cell], x), expected, rtol=0, atol=1e-15)


def test_rnn_two_steps_by_hand():
    cell = nn.Recurrent(1, 2)
    cell.W_in.value[...] = [[0.5, -1.0]]
    cell.W_h.value[...] = [[0.1, 0.2], [0.3, 0.4]]
    cell.b.value[...] = [0.05, -0.05]
    x = np.array([[1.0], [2.0]])
    h1 = np.array([np.tanh(0.5 + 0.05), np.tanh(-1.0 - 0.05)])
    h2 = np.array([np.tanh(1.0 + 0.05 + 0.1 * h1[0] + 0.3 * h1[1]),
                   np.tanh(-2.0 - 0.05 + 0.2 * h1[0] + 0.4 * h1[1])])
    np.testing.assert_allclose(nn.rnn_forward([cell], x), h2, rtol=1e-14)


def test_rnn_empty_sequence():
    with pytest.raises(ValueError):
        nn.rnn_forward([nn.Recurrent(2, 2)], np.zeros((0, 2)))


def test_orthogonal_hidden_init():
    W = nn.Recurrent(3, 6, np.random.default_rng(0)).W_h.value
    np.testing.assert_allclose(W @ W.T, np.eye(6), atol=1e-12)


# -- gradients ---------------------------------------------------------------------

@pytest.mark.parametrize("act", nn.ACTIVATIONS)
def test_dense_gradients(act):
    rng = np.random.default_rng(2)
    layer = nn.Dense(4, 3, act, rng)
    layer.b.value[...] = rng.standard_normal(3) * 0.1
    x = rng.standard_normal((5, 4))
    y = rng.standard_normal((5, 3))
    dx = check_model(nn.Sequential([layer]), x, y)
    # input gradient too
    num = numeric_grads([nn.Param("x", x)], lambda: nn.mse_loss(layer.forward(x), y)[0])[0]
    assert rel_error(dx, num) < 1e-4


def test_three_layer_net_gradients():
    rng = np.random.default_rng(3)
    net = nn.Sequential([nn.Dense(5, 8, "relu", rng), nn.Dense(8, 6, "tanh", rng),
                         nn.Dense(6, 2, "identity", rng)])
    check_model(net, rng.standard_normal((7, 5)), rng.standard_normal((7, 2)), l2=0.01)


def test_recurrent_gradients():
    rng = np.random.default_rng(4)
    net = nn.Sequential([nn.Recurrent(3, 5, rng, "r0"), nn.Recurrent(5, 4, rng, "r1"),
                         nn.LastStep(), nn.Dense(4, 1, rng=rng)])
    x = rng.standard_normal((6, 4, 3))
    y = (rng.random(6) > 0.5).astype(float)
    check_model(net, x, y, loss="bce", l2=0.05)


def test_bce_matches_direct_formula():
    z = np.array([[-3.0], [0.2], [5.0]])
    y = np.array([0.0, 1.0, 1.0])
    p = 1 / (1 + np.exp(-z[:, 0]))
    direct = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert nn.bce_with_logits(z, y)[0] == pytest.approx(direct, rel=1e-12)


def test_l2_penalty_value_and_gradient():
    w = nn.Param("w", np.array([[1.0, -2.0]]))
    b = nn.Param("b", np.array([3.0]), decay=False)
    assert nn.l2_penalty([w, b], 0.5) == pytest.approx(0.5 * 5.0)
    np.testing.assert_allclose(w.grad, 2 * 0.5 * w.value)
    assert np.all(b.grad == 0.0)


# -- dropout -------------------------------------------------------------------------

def test_dropout_inference_identity():
    d = nn.Dropout(0.5, np.random.default_rng(0)).eval()
    x = np.random.default_rng(1).standard_normal((4, 3))
    assert d.forward(x) is x


def test_dropout_inverted_scaling():
    d = nn.Dropout(0.25, np.random.default_rng(0))
    y = d.forward(np.ones((200, 200)))
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert y.mean() == pytest.approx(1.0, abs=0.02)
    np.testing.assert_array_equal(d.backward(np.ones_like(y)), y)


def test_dropout_rate_validated():
    with pytest.raises(ValueError):
        nn.Dropout(1.0)


# -- optimisation -------------------------------------------------------------------

def test_zero_learning_rate_keeps_parameters():
    rng = np.random.default_rng(5)
    net = nn.Sequential([nn.Dense(3, 2, "tanh", rng)])
    before = [p.value.copy() for p in net.parameters()]
    adam = nn.Adam(net.parameters(), learning_rate=0.0)
    loss = nn.backward_and_step(net, (rng.standard_normal((4, 3)), np.zeros((4, 2))), "mse", adam)
    assert loss > 0
    for b, p in zip(before, net.parameters()):
        np.testing.assert_array_equal(b, p.value)


def test_adam_quadratic_monotone():
    layer = nn.Dense(1, 1)
    layer.W.value[...] = 0.0
    layer.b.value[...] = 0.0
    net = nn.Sequential([layer])
    adam = nn.Adam(net.parameters(), learning_rate=0.01)
    x, y = np.zeros((1, 1)), np.array([[3.0]])
    losses = [nn.backward_and_step(net, (x, y), "mse", adam) for _ in range(100)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_divergence_detected():
    net = nn.Sequential([nn.Dense(1, 1)])
    adam = nn.Adam(net.parameters())
    with pytest.raises(nn.DivergenceError, match="divergence"):
        nn.backward_and_step(net, (np.array([[np.inf]]), np.zeros((1, 1))), "mse", adam)


def test_empty_batch_rejected():
    net = nn.Sequential([nn.Dense(1, 1)])
    with pytest.raises(ValueError):
        nn.backward_and_step(net, (np.zeros((0, 1)), np.zeros((0, 1))), "mse", nn.Adam(net.parameters()))


def _trajectory(seed):
    rng = np.random.default_rng(seed)
    net = nn.Sequential([nn.Recurrent(2, 3, rng), nn.Dropout(0.3, rng), nn.LastStep(), nn.Dense(3, 1, rng=rng)])
    adam = nn.Adam(net.parameters(), 0.01)
    data = np.random.default_rng(99)
    for _ in range(5):
        nn.backward_and_step(net, (data.standard_normal((4, 3, 2)), data.integers(0, 2, 4).astype(float)),
                             "bce", adam, 0.01)
    return adam.flat.copy()


def test_same_seed_bit_identical():
    np.testing.assert_array_equal(_trajectory(7), _trajectory(7))


# -- weight files -----------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_weight_file_roundtrip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    src = nn.Sequential([nn.Recurrent(3, 4, rng, "r"), nn.Dense(4, 2, rng=rng, name="d")])
    for p in src.parameters():
        p.value[...] = rng.standard_normal(p.value.shape) * 10.0 ** rng.integers(-8, 8)
    path = tmp_path_factory.mktemp("w") / "w.txt"
    nn.save_weights(path, src.parameters())
    assert path.read_text().startswith("format_version=1\n")
    dst = nn.Sequential([nn.Recurrent(3, 4, None, "r"), nn.Dense(4, 2, name="d")])
    nn.load_weights(path, dst.parameters())
    for a, b in zip(src.parameters(), dst.parameters()):
        np.testing.assert_array_equal(a.value, b.value)


def test_weight_file_shape_mismatch(tmp_path):
    nn.save_weights(tmp_path / "w.txt", nn.Dense(3, 2, name="d").parameters())
    with pytest.raises(ValueError):
        nn.load_weights(tmp_path / "w.txt", nn.Dense(2, 2, name="d").parameters())
