"""Learning-core oracles: forward pass, Bellman targets, gradients,
tabular equivalence, schedule, buffer, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rng_for
from qroute.dqn import (
    QNetwork,
    ReplayBuffer,
    TrainConfig,
    Transition,
    bellman_target,
    bellman_targets,
    epsilon_at,
    load_weights,
    loss_and_grads,
    save_weights,
    sgd_step,
)
from qroute.errors import ConfigError, ContractError


def one_hot(i: int, dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def set_weights(qnet: QNetwork, weights, biases=None) -> None:
    for layer, w in enumerate(weights):
        qnet.weights[layer][...] = w
    if biases is not None:
        for layer, b in enumerate(biases):
            qnet.biases[layer][...] = b
    qnet.sync_target()


def test_forward_hand_computed_case():
    # x=[1,2], identity first layer with bias [0.5,-3] -> relu [1.5, 0],
    # second layer [[2,-1],[1,1]] with bias [0,1] -> [3.0, -0.5].
    qnet = QNetwork(2, 2, hidden_sizes=(2,), rng=rng_for(0))
    set_weights(qnet,
                [np.eye(2), np.array([[2.0, -1.0], [1.0, 1.0]])],
                [np.array([0.5, -3.0]), np.array([0.0, 1.0])])
    out = qnet.forward(np.array([1.0, 2.0]))
    assert out == pytest.approx([3.0, -0.5], abs=1e-12)


def test_forward_matches_independent_matmul_chain():
    rng = rng_for(5)
    qnet = QNetwork(7, 4, hidden_sizes=(6, 5), rng=rng)
    xs = rng.normal(size=(9, 7))
    # Reference forward written out long-hand.
    h = xs
    for w, b in zip(qnet.weights[:-1], qnet.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
    want = h @ qnet.weights[-1] + qnet.biases[-1]
    got = qnet.forward(xs)
    assert np.max(np.abs(got - want)) < 1e-12
    # Single-state call agrees with the batched one.
    assert np.allclose(qnet.forward(xs[3]), got[3], atol=1e-12)


def test_forward_zero_weights_gives_zero():
    qnet = QNetwork(3, 2, hidden_sizes=(4,), rng=rng_for(0))
    set_weights(qnet, [np.zeros((3, 4)), np.zeros((4, 2))])
    assert np.all(qnet.forward(np.array([1.0, -2.0, 3.0])) == 0.0)


def test_forward_rejects_wrong_dim():
    qnet = QNetwork(3, 2, hidden_sizes=(), rng=rng_for(0))
    with pytest.raises(ContractError, match="dim"):
        qnet.forward(np.zeros(5))


def test_init_is_fan_in_scaled_and_seeded():
    a = QNetwork(10, 3, hidden_sizes=(8,), rng=rng_for(11))
    b = QNetwork(10, 3, hidden_sizes=(8,), rng=rng_for(11))
    c = QNetwork(10, 3, hidden_sizes=(8,), rng=rng_for(12))
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert not all(np.array_equal(x, y) for x, y in zip(a.weights, c.weights))
    assert np.max(np.abs(a.weights[0])) <= 1.0 / np.sqrt(10)
    assert np.max(np.abs(a.weights[1])) <= 1.0 / np.sqrt(8)
    assert all(np.all(bias == 0.0) for bias in a.biases)


def test_bellman_hand_cases():
    # Single linear layer on one-hot states: Q(s') rows are the weights.
    qnet = QNetwork(2, 2, hidden_sizes=(), use_bias=False, rng=rng_for(0))
    set_weights(qnet, [np.array([[2.0, -1.0], [0.5, 3.0]])])
    s0, s1 = one_hot(0, 2), one_hot(1, 2)
    assert bellman_target(qnet, 1.0, s0, False, 0.5) == pytest.approx(2.0)
    assert bellman_target(qnet, 1.0, s1, False, 0.5) == pytest.approx(2.5)
    assert bellman_target(qnet, 1.0, s0, True, 0.5) == pytest.approx(1.0)
    assert bellman_target(qnet, -1.0, s1, False, 1.0) == pytest.approx(2.0)
    assert bellman_target(qnet, 0.0, s0, False, 0.0) == pytest.approx(0.0)
    out = bellman_targets(qnet, np.array([1.0, 1.0]), np.stack([s0, s1]),
                          np.array([False, True]), 0.5)
    assert out == pytest.approx([2.0, 1.0])


def test_bellman_uses_target_weights_not_prediction():
    qnet = QNetwork(2, 2, hidden_sizes=(), use_bias=False, rng=rng_for(0))
    set_weights(qnet, [np.array([[1.0, 0.0], [0.0, 0.0]])])
    qnet.weights[0][...] = 100.0  # prediction moves, target stays
    assert bellman_target(qnet, 0.0, one_hot(0, 2), False, 1.0) == pytest.approx(1.0)


def test_single_layer_gradient_matches_hand_formula():
    # loss = 0.5/B * sum_i (x_i . w[:, a_i] - t_i)^2 for a bias-free linear
    # net, so dW = x^T G with G[i, a_i] = err_i / B.
    rng = rng_for(3)
    qnet = QNetwork(4, 3, hidden_sizes=(), use_bias=False, rng=rng)
    w0 = qnet.weights[0].copy()
    states = rng.normal(size=(5, 4))
    actions = np.array([0, 2, 1, 2, 0])
    targets = rng.normal(size=5)
    q = states @ w0
    err = q[np.arange(5), actions] - targets
    g = np.zeros_like(q)
    g[np.arange(5), actions] = err / 5
    want = states.T @ g
    loss, grads_w, _ = loss_and_grads(qnet, states, actions, targets)
    assert loss == pytest.approx(0.5 * float(np.mean(err ** 2)), abs=1e-12)
    assert np.max(np.abs(grads_w[0] - want)) < 1e-12
    # And one sgd step applies exactly -lr * grad when clipping is off.
    cfg = TrainConfig(learning_rate=0.05, discount=0.0, grad_clip=None,
                      hidden_sizes=())
    batch = [Transition(states[i], int(actions[i]), float(targets[i]),
                        np.zeros(4), True) for i in range(5)]
    sgd_step(qnet, batch, cfg)
    assert np.max(np.abs(qnet.weights[0] - (w0 - 0.05 * want))) < 1e-12


def test_gradients_match_finite_differences():
    rng = rng_for(21)
    qnet = QNetwork(6, 3, hidden_sizes=(5, 4), rng=rng)
    states = rng.normal(size=(8, 6))
    actions = rng.integers(0, 3, size=8)
    targets = rng.normal(size=8)
    _, grads_w, grads_b = loss_and_grads(qnet, states, actions, targets)

    def loss_now() -> float:
        q = qnet.forward(states)
        err = q[np.arange(8), actions] - targets
        return 0.5 * float(np.mean(err ** 2))

    h = 1e-6
    worst = 0.0
    for params, grads in ((qnet.weights, grads_w), (qnet.biases, grads_b)):
        for layer, grad in zip(params, grads):
            flat = layer.reshape(-1)
            gflat = grad.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_now()
                flat[k] = orig - h
                down = loss_now()
                flat[k] = orig
                num = (up - down) / (2 * h)
                rel = abs(gflat[k] - num) / max(abs(gflat[k]) + abs(num), 1e-8)
                worst = max(worst, rel)
    assert worst < 1e-4


def test_sgd_descends_on_fixed_batch():
    rng = rng_for(9)
    qnet = QNetwork(5, 3, hidden_sizes=(8,), rng=rng)
    cfg = TrainConfig(learning_rate=0.01, discount=0.9, hidden_sizes=(8,))
    batch = [Transition(rng.normal(size=5), int(rng.integers(0, 3)),
                        float(rng.normal()), rng.normal(size=5), bool(rng.random() < 0.5))
             for _ in range(16)]
    losses = [sgd_step(qnet, batch, cfg) for _ in range(30)]
    assert losses[-1] < losses[0]


def test_sgd_noop_when_targets_equal_predictions():
    qnet = QNetwork(3, 2, hidden_sizes=(), use_bias=False, rng=rng_for(0))
    set_weights(qnet, [np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])])
    before = qnet.weights[0].copy()
    # Terminal transitions with reward equal to the current Q value.
    s = one_hot(1, 3)
    batch = [Transition(s, 1, 4.0, s, True)]
    cfg = TrainConfig(learning_rate=0.5, hidden_sizes=())
    loss = sgd_step(qnet, batch, cfg)
    assert loss == pytest.approx(0.0, abs=1e-24)
    assert np.max(np.abs(qnet.weights[0] - before)) < 1e-12


def test_sgd_reports_pre_step_loss():
    qnet = QNetwork(2, 2, hidden_sizes=(), use_bias=False, rng=rng_for(0))
    set_weights(qnet, [np.zeros((2, 2))])
    batch = [Transition(one_hot(0, 2), 0, 2.0, one_hot(0, 2), True)]
    cfg = TrainConfig(learning_rate=0.1, hidden_sizes=(), grad_clip=None)
    assert sgd_step(qnet, batch, cfg) == pytest.approx(2.0)  # 0.5 * (0-2)^2


def test_sgd_raises_on_nonfinite_gradients():
    qnet = QNetwork(2, 2, hidden_sizes=(4,), rng=rng_for(0))
    qnet.weights[0][...] = 1e200
    qnet.weights[1][...] = 1e200
    batch = [Transition(np.array([1.0, 1.0]), 0, 0.0, np.array([1.0, 1.0]), True)]
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(ContractError, match="non-finite"):
            sgd_step(qnet, batch, TrainConfig(hidden_sizes=(4,)))


def test_gradient_clipping_rescales_to_configured_norm():
    qnet = QNetwork(2, 2, hidden_sizes=(), use_bias=False, rng=rng_for(0))
    set_weights(qnet, [np.zeros((2, 2))])
    before = qnet.weights[0].copy()
    batch = [Transition(np.array([10.0, 0.0]), 0, 100.0, np.zeros(2), True)]
    cfg = TrainConfig(learning_rate=1.0, hidden_sizes=(), grad_clip=1.0)
    sgd_step(qnet, batch, cfg)
    delta = qnet.weights[0] - before
    assert np.sqrt((delta ** 2).sum()) == pytest.approx(1.0, rel=1e-9)


def test_tabular_equivalence():
    # A bias-free linear net on one-hot states, stepped one transition at a
    # time, must track the classical tabular update exactly.
    n_states, n_actions = 4, 3
    qnet = QNetwork(n_states, n_actions, hidden_sizes=(), use_bias=False,
                    rng=rng_for(0))
    set_weights(qnet, [np.zeros((n_states, n_actions))])
    table = np.zeros((n_states, n_actions))
    table_target = table.copy()
    cfg = TrainConfig(learning_rate=0.1, discount=0.95, hidden_sizes=(),
                      grad_clip=None)
    rng = rng_for(77)
    for step in range(300):
        s = int(rng.integers(0, n_states))
        a = int(rng.integers(0, n_actions))
        r = float(rng.normal())
        s2 = int(rng.integers(0, n_states))
        term = bool(rng.random() < 0.2)
        tr = Transition(one_hot(s, n_states), a, r, one_hot(s2, n_states), term)
        sgd_step(qnet, [tr], cfg)
        tgt = r + 0.95 * table_target[s2].max() * (0.0 if term else 1.0)
        table[s, a] += 0.1 * (tgt - table[s, a])
        if (step + 1) % 20 == 0:
            qnet.sync_target()
            table_target = table.copy()
        assert np.max(np.abs(qnet.weights[0] - table)) <= 1e-10


def test_sync_target_copies_without_aliasing():
    qnet = QNetwork(3, 2, hidden_sizes=(4,), rng=rng_for(1))
    qnet.weights[0][0, 0] = 123.0
    assert qnet.target_weights[0][0, 0] != 123.0
    qnet.sync_target()
    assert qnet.target_weights[0][0, 0] == 123.0
    qnet.weights[0][0, 0] = -5.0
    assert qnet.target_weights[0][0, 0] == 123.0


def test_epsilon_schedule_endpoints_and_midpoint():
    cfg = TrainConfig(epsilon_start=1.0, epsilon_end=0.05, epsilon_decay_steps=100)
    assert epsilon_at(cfg, 0) == pytest.approx(1.0)
    assert epsilon_at(cfg, 50) == pytest.approx(0.525)
    assert epsilon_at(cfg, 100) == pytest.approx(0.05)
    assert epsilon_at(cfg, 10_000) == pytest.approx(0.05)
    zero = TrainConfig(epsilon_start=1.0, epsilon_end=0.3, epsilon_decay_steps=0)
    assert epsilon_at(zero, 0) == pytest.approx(0.3)


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=10_000),
       st.integers(min_value=1, max_value=2_000))
def test_epsilon_schedule_stays_in_range(step, horizon):
    cfg = TrainConfig(epsilon_start=0.9, epsilon_end=0.1,
                      epsilon_decay_steps=horizon)
    eps = epsilon_at(cfg, step)
    assert 0.1 <= eps <= 0.9
    if step < horizon:
        assert epsilon_at(cfg, step + 1) <= eps + 1e-12


def test_replay_buffer_fifo_eviction():
    buf = ReplayBuffer(3)
    items = [Transition(np.array([float(i)]), 0, 0.0, np.array([0.0]), True)
             for i in range(5)]
    for t in items:
        buf.push(t)
    kept = {float(t.state[0]) for t in buf._items}
    assert kept == {2.0, 3.0, 4.0}
    assert len(buf) == 3


def test_replay_sample_without_replacement_and_determinism():
    buf = ReplayBuffer(50)
    for i in range(50):
        buf.push(Transition(np.array([float(i)]), 0, 0.0, np.array([0.0]), True))
    got = buf.sample(rng_for(4), 20)
    vals = [float(t.state[0]) for t in got]
    assert len(set(vals)) == 20
    again = [float(t.state[0]) for t in buf.sample(rng_for(4), 20)]
    assert vals == again
    with pytest.raises(ContractError):
        buf.sample(rng_for(0), 51)


def test_checkpoint_round_trip_exact(tmp_path):
    qnet = QNetwork(6, 4, hidden_sizes=(5,), rng=rng_for(2))
    qnet.weights[0][0, 0] = 1.0 / 3.0  # not exactly representable in decimal text
    path = tmp_path / "weights.json"
    save_weights(qnet, path)
    back = load_weights(path)
    for a, b in zip(qnet.weights + qnet.target_weights,
                    back.weights + back.target_weights):
        assert np.array_equal(a, b)
    for a, b in zip(qnet.biases + qnet.target_biases,
                    back.biases + back.target_biases):
        assert np.array_equal(a, b)
    x = rng_for(3).normal(size=6)
    assert np.array_equal(qnet.forward(x), back.forward(x))


def test_checkpoint_rejects_malformed(tmp_path):
    path = tmp_path / "weights.json"
    path.write_text("{\"input_dim\": 3}")
    with pytest.raises(ConfigError, match="missing field"):
        load_weights(path)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ConfigError, match="discount"):
        TrainConfig(discount=1.5).validate()
    with pytest.raises(ConfigError, match="buffer_capacity"):
        TrainConfig(batch_size=64, buffer_capacity=32).validate()
    TrainConfig().validate()
