import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fusionforge.temporal_lstm import (
    DivergenceError,
    LstmLayerParams,
    LstmNetwork,
    SequenceSample,
    TrainOptions,
    _loss_and_grads,
    bptt_gradients,
    forward,
    gradient_check,
    init_network,
    load_network,
    loss,
    lstm_step,
    majority_task,
    save_network,
    sigmoid,
    softmax,
    train,
)


def zero_layer(D, H):
    return LstmLayerParams(np.zeros((4 * H, D)), np.zeros((4 * H, H)), np.zeros((3, H)), np.zeros(4 * H))


def random_net(seed, D, hidden, C, scale=0.5):
    return init_network(D, hidden, C, seed=seed, scale=scale)


def random_seq(seed, T, D, C):
    r = np.random.default_rng(seed)
    return SequenceSample(r.normal(size=(T, D)), int(r.integers(0, C)))


# -- single step -------------------------------------------------------------------

def test_zero_params_step():
    p = zero_layer(3, 4)
    h, c = lstm_step(p, np.ones(3), (np.zeros(4), np.zeros(4)))
    assert h.tolist() == [0.0] * 4 and c.tolist() == [0.0] * 4
    c_prev = np.array([1.0, -2.0, 0.5, 4.0])
    h, c = lstm_step(p, np.ones(3), (np.zeros(4), c_prev))
    np.testing.assert_allclose(c, 0.5 * c_prev, rtol=1e-15)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev), rtol=1e-15)


def test_saturated_forget_gate_keeps_memory():
    p = zero_layer(2, 3)
    p.b_f[:] = 20.0
    v = np.array([0.3, -1.2, 2.0])
    _, c = lstm_step(p, np.zeros(2), (np.zeros(3), v))
    np.testing.assert_allclose(c, v, rtol=1e-8)


def test_memory_reset_at_saturation():
    p = zero_layer(2, 3)
    p.b_f[:] = -50.0
    p.b_i[:] = 50.0
    p.W_xc[:] = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]])
    x = np.array([0.7, -0.4])
    _, c = lstm_step(p, x, (np.zeros(3), np.array([9.0, -9.0, 3.0])))
    np.testing.assert_allclose(c, np.tanh(p.W_xc @ x), rtol=1e-12, atol=1e-15)


@given(st.integers(0, 2**32))
def test_step_bounds(seed):
    r = np.random.default_rng(seed)
    p = LstmLayerParams(r.normal(size=(12, 4)) * 5, r.normal(size=(12, 3)) * 5,
                        r.normal(size=(3, 3)) * 5, r.normal(size=12) * 5)
    h, c = lstm_step(p, r.normal(size=4) * 5, (r.uniform(-1, 1, 3), r.normal(size=3) * 5))
    assert np.all(np.abs(h) <= 1.0)
    g = sigmoid(r.normal(size=50) * 5)
    assert np.all((g > 0) & (g < 1))


def test_step_dimension_mismatch():
    with pytest.raises(ValueError):
        lstm_step(zero_layer(3, 4), np.zeros(2), (np.zeros(4), np.zeros(4)))


def test_named_views_alias_storage():
    p = zero_layer(2, 3)
    p.W_hc[1, 2] = 7.0
    assert p.Wh[2 * 3 + 1, 2] == 7.0
    p.w_co[0] = 3.0
    assert p.P[2, 0] == 3.0
    with pytest.raises(AttributeError):
        p.W_xz


# -- softmax and forward ------------------------------------------------------------------

def test_softmax_examples(rng):
    assert softmax(np.zeros(4)).tolist() == [0.25] * 4
    z = np.array([math.log(1), math.log(3)])
    np.testing.assert_allclose(softmax(z), [0.25, 0.75], rtol=1e-15)
    np.testing.assert_allclose(softmax(z + 100.0), softmax(z), rtol=1e-13)
    for _ in range(20):
        assert abs(softmax(rng.normal(size=7) * 30).sum() - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        softmax(np.array([0.0, np.nan]))


def test_single_step_forward_is_step_per_layer_plus_head():
    net = random_net(1, 3, (4, 2), 3)
    seq = random_seq(2, 1, 3, 3)
    h = seq.inputs[0]
    for layer in net.layers:
        h, _ = lstm_step(layer, h, (np.zeros(layer.hidden_dim), np.zeros(layer.hidden_dim)))
    _, probs = forward(net, seq)
    np.testing.assert_allclose(probs, softmax(net.head_U @ h + net.head_b), rtol=1e-13)


def test_forward_matches_stepwise_oracle():
    net = random_net(3, 4, (5, 3), 2)
    seq = random_seq(4, 9, 4, 2)
    inputs = seq.inputs
    for li, layer in enumerate(net.layers):
        H = layer.hidden_dim
        h, c, hs = np.zeros(H), np.zeros(H), []
        for x in inputs:
            h, c = lstm_step(layer, x, (h, c))
            hs.append(h)
        inputs = np.array(hs)
    states, probs = forward(net, seq)
    np.testing.assert_allclose(states[-1][0][1:], inputs, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(probs, softmax(net.head_U @ inputs[-1] + net.head_b), rtol=1e-12)


def test_zero_network_is_uniform():
    net = init_network(3, (4,), 4, scale=0.0, forget_bias=0.0)
    seq = random_seq(0, 5, 3, 4)
    _, probs = forward(net, seq)
    assert probs.tolist() == [0.25] * 4
    assert loss(net, seq) == pytest.approx(math.log(4), rel=1e-15)
    a, b = forward(net, seq)[1], forward(net, seq)[1]
    assert a.tobytes() == b.tobytes()


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        SequenceSample(np.zeros((0, 3)), 0)


# -- gradients ------------------------------------------------------------------------------

def test_head_bias_gradient_at_uniform():
    net = init_network(3, (4,), 4, scale=0.0, forget_bias=0.0)
    seq = SequenceSample(np.ones((1, 3)), 2)
    g = bptt_gradients(net, seq)
    np.testing.assert_allclose(g.head_b, [0.25, 0.25, -0.75, 0.25], rtol=1e-15)


@pytest.mark.parametrize("hidden,T", [((8, 6), 7), ((6,), 1), ((6,), 7), ((5, 4), 1)])
def test_gradient_check(hidden, T):
    net = random_net(7, 5, hidden, 3)
    seq = random_seq(8, T, 5, 3)
    assert gradient_check(net, seq) <= 1e-4


def test_batch_gradient_is_mean_of_sample_gradients():
    net = random_net(5, 3, (4, 3), 3)
    a, b = random_seq(1, 6, 3, 3), random_seq(2, 6, 3, 3)
    val, g = _loss_and_grads(net, [a, b])
    assert val == pytest.approx((loss(net, a) + loss(net, b)) / 2, rel=1e-13)
    ga, gb = bptt_gradients(net, a), bptt_gradients(net, b)
    for x, y, z in zip(g.arrays(), ga.arrays(), gb.arrays()):
        np.testing.assert_allclose(x, (y + z) / 2, rtol=1e-12, atol=1e-15)


# -- training ------------------------------------------------------------------------------------

def test_majority_task_labels():
    for s in majority_task(50, seq_len=9, n_classes=3, seed=4):
        counts = s.inputs.sum(axis=0)
        assert np.sum(counts == counts.max()) == 1
        assert s.label == int(np.argmax(counts))
        assert set(np.unique(s.inputs)) <= {0.0, 1.0}


def test_zero_learning_rate_leaves_params():
    net = init_network(4, (5,), 4, seed=1)
    res = train(net, majority_task(40, seq_len=6, seed=1), TrainOptions(learning_rate=0.0, max_iters=5))
    for a, b in zip(net.arrays(), res.net.arrays()):
        assert np.array_equal(a, b)


def test_training_is_deterministic_and_learns():
    data = majority_task(200, seq_len=8, n_classes=3, seed=2)
    net = init_network(3, (8,), 3, seed=2)
    opts = TrainOptions(learning_rate=3e-2, max_iters=300, seed=5)
    a, b = train(net, data, opts), train(net, data, opts)
    assert a.loss_trace == b.loss_trace
    assert np.mean(a.loss_trace[-30:]) < np.mean(a.loss_trace[:30])


def test_early_stop_on_target_accuracy():
    data = majority_task(100, seq_len=5, n_classes=2, seed=3)
    res = train(init_network(2, (6,), 2, seed=0), data,
                TrainOptions(learning_rate=5e-2, max_iters=3000, target_accuracy=0.9, check_every=50))
    assert res.stopped_early and len(res.loss_trace) % 50 == 0 and len(res.loss_trace) < 3000


def test_divergence_is_reported():
    net = init_network(3, (4,), 3, seed=0)
    net.head_U[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(net, majority_task(10, seq_len=4, n_classes=3), TrainOptions(max_iters=2))


def test_network_round_trip(tmp_path):
    net = random_net(9, 3, (4, 2), 3)
    save_network(net, tmp_path / "n.json", extra={"config": {"seed": 9}})
    back = load_network(tmp_path / "n.json")
    assert isinstance(back, LstmNetwork)
    for a, b in zip(net.arrays(), back.arrays()):
        assert a.tobytes() == b.tobytes()


def test_layer_shape_validation():
    with pytest.raises(ValueError):
        LstmLayerParams(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros((3, 2)), np.zeros(8))
    layers = [zero_layer(3, 4), zero_layer(5, 2)]
    with pytest.raises(ValueError):
        LstmNetwork(layers, np.zeros((3, 2)), np.zeros(3))
