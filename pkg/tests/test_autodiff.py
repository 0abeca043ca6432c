import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fpo import autodiff as ad
from fpo.autodiff import GraphError, NonFiniteError, Tape, Tensor


def numgrad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def grad_of(fn, x):
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        loss = fn(t)
    return tape.gradient(loss, [t])[0]


def test_square_at_three_gives_six_at_that_index():
    theta = np.zeros(4)
    theta[2] = 3.0
    g = grad_of(lambda t: t[2] ** 2, theta)
    np.testing.assert_array_equal(g, [0, 0, 6, 0])


def test_constant_loss_gives_zero_gradient():
    x = np.arange(3.0)
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        loss = Tensor(5.0)
    np.testing.assert_array_equal(tape.gradient(loss, [t])[0], 0.0)


def test_non_scalar_loss_rejected():
    with Tape() as tape:
        t = Tensor(np.ones(3), requires_grad=True)
        y = t * 2.0
    with pytest.raises(GraphError):
        tape.gradient(y, [t])


def test_unrecorded_loss_rejected():
    t = Tensor(np.ones(3), requires_grad=True)
    y = (t * 2.0).sum()  # built outside any tape
    with Tape() as tape:
        pass
    with pytest.raises(GraphError):
        tape.gradient(y, [t])


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with Tape():
        t = Tensor([0.0], requires_grad=True)
        with pytest.raises(NonFiniteError):
            ad.log(t)


UNARY = {
    "exp": lambda t: ad.exp(t).sum(),
    "tanh": lambda t: ad.tanh(t).sum(),
    "sigmoid": lambda t: (ad.sigmoid(t) * t).sum(),
    "swish": lambda t: ad.swish(t).sum(),
    "pow3": lambda t: (t ** 3).mean(),
    "log": lambda t: ad.log(t * t + 1.0).sum(),
    "div": lambda t: (1.0 / (t * t + 2.0)).sum(),
    "getitem": lambda t: (t[1:] * t[:-1]).sum(),
    "fancy": lambda t: (t[np.array([0, 0, 2])] ** 2).sum(),
    "concat": lambda t: (ad.concat([t, t * 2.0], axis=0) ** 2).sum(),
    "reshape": lambda t: (t.reshape(-1, 1) @ np.ones((1, 3))).sum(),
    "clip": lambda t: (ad.clip(t, -0.5, 0.5) * t).sum(),
    "minmax": lambda t: (ad.minimum(t, 0.3) + ad.maximum(t * t, 0.2)).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradients_match_central_differences(name):
    rng = np.random.default_rng(1)
    x = rng.normal(size=4)
    # keep away from kinks of clip/min/max
    x = np.where(np.abs(np.abs(x) - 0.5) < 1e-2, x + 0.05, x)
    f = UNARY[name]
    g = grad_of(f, x)
    num = numgrad(lambda v: f(Tensor(v)).item(), x)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-8)


def test_broadcasting_gradients():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    with Tape() as tape:
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        loss = ((ta * tb + tb) ** 2).sum()
    ga, gb = tape.gradient(loss, [ta, tb])
    f_b = lambda v: float((((a * v + v) ** 2)).sum())
    np.testing.assert_allclose(gb, numgrad(f_b, b), rtol=1e-6)
    assert ga.shape == a.shape


def test_matmul_gradient():
    rng = np.random.default_rng(2)
    a, w = rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
    g = grad_of(lambda t: ad.tanh(Tensor(a) @ t).sum(), w)
    np.testing.assert_allclose(g, numgrad(lambda v: np.tanh(a @ v).sum(), w), rtol=1e-6)


def test_ndarray_on_left_dispatches_to_tensor():
    t = Tensor([1.0, 2.0])
    out = np.array([2.0, 3.0]) * t
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, [2.0, 6.0])


def test_reused_node_accumulates():
    g = grad_of(lambda t: (t * t + t * 3.0).sum(), np.array([2.0]))
    np.testing.assert_allclose(g, [7.0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)),
       arrays(np.float64, 1, elements=st.floats(0.1, 2)))
def test_linearity_of_gradient(x, c):
    # d/dx (c * f) = c * d/dx f
    f = lambda t: ad.tanh(t).sum()
    g1 = grad_of(f, x)
    g2 = grad_of(lambda t: f(t) * float(c[0]), x)
    np.testing.assert_allclose(g2, g1 * c[0], rtol=1e-12, atol=1e-15)
