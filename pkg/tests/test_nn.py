import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpo.autodiff import NonFiniteError, Tape, Tensor
from fpo.nn import AdamState, Mlp, ParamSet, adam_step, forward


def loop_forward(mlp, theta, x):
    """Explicit-loop reference forward pass."""
    h = [list(row) for row in x]
    for li, (w, (n_in, n_out), b) in enumerate(mlp.layout):
        W = theta[w].reshape(n_in, n_out)
        bias = theta[b]
        new = []
        for row in h:
            out = []
            for j in range(n_out):
                s = bias[j]
                for i in range(n_in):
                    s += row[i] * W[i, j]
                out.append(np.tanh(s) if li < len(mlp.layout) - 1 else s)
            new.append(out)
        h = new
    return np.array(h)


def test_zero_params_give_zero_output():
    mlp = Mlp((3, 5, 2))
    out = forward(mlp, np.zeros(mlp.n_params), np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_identity_linear_layer():
    mlp = Mlp((2, 2))
    theta = np.concatenate([np.eye(2).ravel(), np.zeros(2)])
    x = np.array([[0.3, -1.2]])
    np.testing.assert_array_equal(forward(mlp, theta, x).data, x)


def test_random_242_matches_loop_oracle():
    mlp = Mlp((2, 4, 2))
    rng = np.random.default_rng(7)
    theta = rng.normal(size=mlp.n_params)
    x = rng.normal(size=(5, 2))
    ref = loop_forward(mlp, theta, x)
    np.testing.assert_allclose(forward(mlp, theta, x).data, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(mlp.apply(theta, x), ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("activation", ["tanh", "swish"])
def test_mlp_gradient_matches_finite_differences(activation):
    mlp = Mlp((2, 3, 1), activation)
    rng = np.random.default_rng(3)
    theta = rng.normal(size=mlp.n_params)
    x = rng.normal(size=(6, 2))
    with Tape() as tape:
        t = Tensor(theta, requires_grad=True)
        loss = mlp.forward(t, x).sum()
    g = tape.gradient(loss, [t])[0]
    h = 1e-5
    num = np.array([(mlp.apply(theta + h * e, x).sum() - mlp.apply(theta - h * e, x).sum()) / (2 * h)
                    for e in np.eye(len(theta))])
    rel = np.abs(g - num) / np.maximum(np.abs(num), 1e-8)
    assert rel.max() < 1e-6


def test_apply_matches_forward_bitwise():
    mlp = Mlp((3, 8, 8, 2), "swish")
    p = mlp.init(np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(10, 3))
    np.testing.assert_array_equal(mlp.apply(p.vector, x), mlp.forward(Tensor(p.vector), x).data)


def test_init_is_orthogonal_with_gains():
    mlp = Mlp((4, 16, 3))
    p = mlp.init(np.random.default_rng(0), final_gain=0.01)
    (w0, s0, b0), (w1, s1, _) = mlp.layout
    W0 = p.vector[w0].reshape(s0)
    np.testing.assert_allclose(W0 @ W0.T, 2.0 * np.eye(4), atol=1e-12)
    W1 = p.vector[w1].reshape(s1)
    np.testing.assert_allclose(W1.T @ W1, 1e-4 * np.eye(3), atol=1e-14)
    np.testing.assert_array_equal(p.vector[b0], 0.0)


def test_input_validation():
    mlp = Mlp((2, 3, 1))
    with pytest.raises(ValueError):
        mlp.apply(np.zeros(mlp.n_params), np.zeros((4, 3)))
    with pytest.raises(NonFiniteError):
        mlp.apply(np.zeros(mlp.n_params), np.array([[np.inf, 0.0]]))


def test_param_set_is_read_only():
    p = ParamSet(np.zeros(3))
    with pytest.raises(ValueError):
        p.vector[0] = 1.0


def test_adam_zero_gradient_only_advances_step():
    p = ParamSet(np.array([1.0, -2.0]))
    st_ = AdamState(2, lr=0.1)
    q = adam_step(p, np.zeros(2), st_)
    np.testing.assert_array_equal(q.vector, p.vector)
    assert q.step == 1 and st_.t == 1


def test_adam_first_step_hand_trace():
    g, lr, eps = 0.5, 0.01, 1e-8
    m = 0.1 * g
    v = 0.001 * g * g
    m_hat, v_hat = m / 0.1, v / 0.001
    expected = 2.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    q = adam_step(ParamSet(np.array([2.0])), np.array([g]), AdamState(1, lr=lr, eps=eps))
    assert q.vector[0] == pytest.approx(expected, abs=1e-15)
    assert q.vector[0] == pytest.approx(2.0 - lr, abs=1e-9)


def test_adam_rejects_non_finite_gradient_without_mutation():
    p = ParamSet(np.zeros(2))
    s = AdamState(2)
    with pytest.raises(NonFiniteError):
        adam_step(p, np.array([1.0, np.nan]), s)
    assert s.t == 0 and not s.m.any()


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-2), st.floats(1e-4, 1e-1))
def test_adam_first_step_size_is_lr(g, lr):
    q = adam_step(ParamSet(np.zeros(1)), np.array([g]), AdamState(1, lr=lr))
    assert abs(q.vector[0]) == pytest.approx(lr, rel=1e-5)
    assert np.sign(q.vector[0]) == -np.sign(g)
