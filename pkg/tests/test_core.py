import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtslstm.core import (GATE_ORDER, LinearWeights, LstmState, LstmWeights, ShapeError, Workspace,
                          gradient_error, init_linear, init_weights, linear_backward, linear_forward,
                          lstm_backward, lstm_forward, numeric_gradient)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def zero_weights(n_in, n_h, forget_bias=0.0):
    w = LstmWeights(np.zeros((4 * n_h, n_in)), np.zeros((4 * n_h, n_h)), np.zeros(4 * n_h))
    w.bias[w.gate("forget")] = forget_bias
    return w


def random_setup(seed=0, n_in=3, n_h=4, steps=5, nb=2):
    rng = np.random.default_rng(seed)
    w = init_weights(n_in, n_h, seed)
    w.w_ih *= 3
    w.bias += rng.normal(size=4 * n_h) * 0.5
    x = rng.normal(size=(steps, nb, n_in))
    init = LstmState(rng.normal(size=(nb, n_h)), rng.normal(size=(nb, n_h)))
    return w, x, init, rng


def test_zero_model_stays_zero():
    w = zero_weights(3, 4)
    x = np.random.default_rng(0).normal(size=(7, 2, 3))
    seq, _ = lstm_forward(w, LstmState.zeros(2, 4), x)
    assert np.all(seq.h == 0) and np.all(seq.c == 0)


def test_forget_bias_geometric_decay():
    w = zero_weights(2, 3, forget_bias=3.0)
    v = np.array([[1.0, -2.0, 0.5]])
    seq, _ = lstm_forward(w, LstmState(np.zeros((1, 3)), v.copy()), np.ones((10, 1, 2)))
    np.testing.assert_allclose(seq.c[-1], sigmoid(3.0) ** 10 * v, rtol=1e-13)


def test_single_cell_hand_evaluation():
    n_h = 2
    w_ih = np.array([[0.1], [-0.2], [0.3], [0.4], [-0.5], [0.6], [0.7], [-0.8]])
    w_hh = np.arange(16, dtype=float).reshape(8, 2) / 20 - 0.4
    bias = np.array([1.0, 0.5, -0.1, 0.2, 0.0, 0.3, -0.2, 0.1])
    w = LstmWeights(w_ih, w_hh, bias)
    h0, c0, x = [0.3, -0.6], [0.2, 0.9], 1.5
    seq, _ = lstm_forward(w, LstmState(np.array([h0]), np.array([c0])), np.array([[[x]]]))
    for j in range(n_h):
        z = [w_ih[g * n_h + j, 0] * x + sum(w_hh[g * n_h + j, k] * h0[k] for k in range(n_h)) + bias[g * n_h + j]
             for g in range(4)]
        f, i, o, g = sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]), math.tanh(z[3])
        c = f * c0[j] + i * g
        assert abs(seq.c[0, 0, j] - c) < 1e-12
        assert abs(seq.h[0, 0, j] - o * math.tanh(c)) < 1e-12


def test_gate_order():
    assert GATE_ORDER == ("forget", "input", "output", "cell")
    w = init_weights(2, 5, 0, forget_bias=3.0)
    assert w.gate("forget") == slice(0, 5)


def test_init_weights_properties():
    w = init_weights(7, 16, 4, forget_bias=3.0)
    assert np.all(w.bias[:16] == 3.0) and np.all(w.bias[16:] == 0.0)
    bound = 1 / math.sqrt(16)
    assert np.abs(w.w_ih).max() <= bound and np.abs(w.w_hh).max() <= bound
    w2 = init_weights(7, 16, 4, forget_bias=3.0)
    assert np.array_equal(w.w_ih, w2.w_ih) and np.array_equal(w.w_hh, w2.w_hh)
    assert not np.array_equal(w.w_ih, init_weights(7, 16, 5).w_ih)
    with pytest.raises(ShapeError):
        init_weights(0, 4)


def test_shape_and_value_errors():
    w = init_weights(3, 4, 0)
    with pytest.raises(ShapeError):
        lstm_forward(w, LstmState.zeros(2, 4), np.zeros((5, 2, 2)))
    with pytest.raises(ShapeError):
        lstm_forward(w, LstmState.zeros(3, 4), np.zeros((5, 2, 3)))
    x = np.zeros((5, 2, 3))
    x[2, 1, 0] = np.nan
    with pytest.raises(ValueError):
        lstm_forward(w, LstmState.zeros(2, 4), x)
    with pytest.raises(ValueError):
        lstm_forward(w, LstmState.zeros(2, 4), np.zeros((5, 2, 3)), dropout_rate=1.0)
    with pytest.raises(ShapeError):
        LstmWeights(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8))
    _, tape = lstm_forward(w, LstmState.zeros(2, 4), np.zeros((5, 2, 3)))
    with pytest.raises(ShapeError):
        lstm_backward(tape, np.zeros((4, 2, 4)))


def test_backward_zero_upstream():
    w, x, init, _ = random_setup()
    _, tape = lstm_forward(w, init, x)
    g = lstm_backward(tape, np.zeros((5, 2, 4)), input_grad=True)
    for arr in (g.w_ih, g.w_hh, g.bias, g.h0, g.c0, g.inputs):
        assert np.all(arr == 0)


@pytest.mark.parametrize("exposed", [5, 2])
def test_backward_matches_finite_differences(exposed):
    w, x, init, rng = random_setup()
    dy = rng.normal(size=(exposed, 2, 4))
    dh = rng.normal(size=(5, 2, 4))
    dc = {1: rng.normal(size=(2, 4)), 3: rng.normal(size=(2, 4))}

    def loss():
        seq, _ = lstm_forward(w, init, x, exposed=exposed)
        return float((seq.h_exposed * dy).sum() + (seq.h * dh).sum()
                     + sum((seq.c[t] * v).sum() for t, v in dc.items()))

    _, tape = lstm_forward(w, init, x, exposed=exposed)
    g = lstm_backward(tape, dy, dh, dc, input_grad=True)
    for analytic, arr in [(g.w_ih, w.w_ih), (g.w_hh, w.w_hh), (g.bias, w.bias), (g.inputs, x),
                          (g.h0, init.h), (g.c0, init.c)]:
        assert gradient_error(analytic, numeric_gradient(loss, arr)) < 1e-5


def test_backward_with_dropout_matches_finite_differences():
    w, x, init, rng = random_setup(1)
    dy = rng.normal(size=(3, 2, 4))

    def loss():
        seq, _ = lstm_forward(w, init, x, 0.4, True, np.random.default_rng(9), exposed=3)
        return float((seq.h_exposed * dy).sum())

    _, tape = lstm_forward(w, init, x, 0.4, True, np.random.default_rng(9), exposed=3)
    g = lstm_backward(tape, dy)
    assert gradient_error(g.w_ih, numeric_gradient(loss, w.w_ih)) < 1e-5
    assert gradient_error(g.c0, numeric_gradient(loss, init.c)) < 1e-5


def test_init_state_gradient_closed_form():
    w = zero_weights(2, 3, forget_bias=3.0)
    init = LstmState(np.zeros((1, 3)), np.array([[0.4, -1.0, 2.0]]))
    steps = 6
    _, tape = lstm_forward(w, init, np.ones((steps, 1, 2)))
    upstream = np.zeros((steps, 1, 3))
    # d c_T / d c_0 via a unit gradient on each final cell component
    for j in range(3):
        dc = np.zeros((steps, 1, 3))
        dc[-1, 0, j] = 1.0
        g = lstm_backward(tape, dh=upstream, dc=dc)
        expected = np.zeros(3)
        expected[j] = sigmoid(3.0) ** steps
        np.testing.assert_allclose(g.c0[0], expected, rtol=1e-13, atol=1e-300)


def test_tape_replay_bitwise():
    w, x, init, _ = random_setup(2)
    seq, tape = lstm_forward(w, init, x)
    again = tape.replay()
    assert np.array_equal(again.h, seq.h) and np.array_equal(again.c, seq.c)


def test_forward_determinism_and_workspace_reuse():
    w, x, init, _ = random_setup(3)
    ws = Workspace()
    a, _ = lstm_forward(w, init, x, 0.3, True, np.random.default_rng(1), workspace=ws)
    a_h = a.h_exposed.copy()
    b, _ = lstm_forward(w, init, x, 0.3, True, np.random.default_rng(1), workspace=ws)
    assert np.array_equal(a_h, b.h_exposed)
    c, _ = lstm_forward(w, init, x, 0.3, True, np.random.default_rng(1))
    assert np.array_equal(a_h, c.h_exposed)


def test_eval_mode_ignores_dropout_and_does_not_mutate():
    w, x, init, _ = random_setup(4)
    before = {k: v.copy() for k, v in w.arrays().items()}
    plain, _ = lstm_forward(w, init, x)
    ev, tape = lstm_forward(w, init, x, dropout_rate=0.5, training=False)
    assert np.array_equal(plain.h_exposed, ev.h_exposed)
    assert tape.mask is None
    for k, v in w.arrays().items():
        assert np.array_equal(v, before[k])


def test_dropout_monte_carlo_expectation():
    w, x, init, _ = random_setup(5, steps=3, nb=1)
    ref, _ = lstm_forward(w, init, x, exposed=1)
    rng = np.random.default_rng(0)
    total = np.zeros_like(ref.h_exposed)
    n = 10_000
    for _ in range(n):
        seq, _ = lstm_forward(w, init, x, 0.4, True, rng, exposed=1)
        total += seq.h_exposed
    np.testing.assert_allclose(total / n, ref.h_exposed, atol=1e-2)


def test_linear_identity_zero_and_gradients(rng):
    x = rng.normal(size=(3, 4, 5))
    assert np.array_equal(linear_forward(LinearWeights.identity(5), x), x)
    b = rng.normal(size=2)
    out = linear_forward(LinearWeights(np.zeros((2, 5)), b), x)
    assert np.array_equal(out, np.broadcast_to(b, (3, 4, 2)))
    lw = init_linear(5, 2, 3)
    dy = rng.normal(size=(3, 4, 2))

    def loss():
        return float((linear_forward(lw, x) * dy).sum())

    g, dx = linear_backward(lw, x, dy)
    assert gradient_error(g.weight, numeric_gradient(loss, lw.weight)) < 1e-7
    assert gradient_error(g.bias, numeric_gradient(loss, lw.bias)) < 1e-7
    assert gradient_error(dx, numeric_gradient(loss, x)) < 1e-7
    with pytest.raises(ShapeError):
        linear_forward(lw, np.zeros((2, 4)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 5), st.integers(1, 6))
def test_gradient_property_random_configs(seed, n_in, n_h, steps):
    rng = np.random.default_rng(seed)
    w = init_weights(n_in, n_h, seed)
    x = rng.normal(size=(steps, 2, n_in))
    init = LstmState(rng.normal(size=(2, n_h)), rng.normal(size=(2, n_h)))
    dy = rng.normal(size=(steps, 2, n_h))

    def loss():
        seq, _ = lstm_forward(w, init, x)
        return float((seq.h_exposed * dy).sum())

    _, tape = lstm_forward(w, init, x)
    g = lstm_backward(tape, dy, input_grad=True)
    for analytic, arr in [(g.w_ih, w.w_ih), (g.w_hh, w.w_hh), (g.bias, w.bias), (g.inputs, x), (g.c0, init.c)]:
        assert gradient_error(analytic, numeric_gradient(loss, arr)) < 1e-5
