import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stmf.diffcore import Dual, NonFiniteError, Tape, Tensor, concat, exp, grad, jvp, matmul, stop_gradient, tanh, value_and_grad, value_of

floats = st.floats(-2.0, 2.0, allow_nan=False)


def composite(x, W):
    h = tanh(matmul(x, W)) * exp(x[..., :1] * 0.5)
    return (h * h).sum() / 3.0 - (h - 1.0).mean()


def fd_directional(f, xs, vs, eps=1e-6):
    plus = f(*[x + eps * v for x, v in zip(xs, vs)])
    minus = f(*[x - eps * v for x, v in zip(xs, vs)])
    return (plus - minus) / (2 * eps)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (3, 4), elements=floats), arrays(float, (4, 5), elements=floats),
       arrays(float, (3, 4), elements=floats), arrays(float, (4, 5), elements=floats))
def test_jvp_matches_central_difference(x, W, vx, vW):
    _, tangent = jvp(composite, [x, W], [vx, vW])
    fd = fd_directional(lambda a, b: composite(a, b), [x, W], [vx, vW])
    assert tangent == pytest.approx(float(fd), rel=1e-6, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (3, 4), elements=floats), arrays(float, (4, 5), elements=floats),
       arrays(float, (3, 4), elements=floats), arrays(float, (4, 5), elements=floats))
def test_forward_and_reverse_agree(x, W, vx, vW):
    _, tangent = jvp(composite, [x, W], [vx, vW])
    gx, gW = grad(composite, [x, W])
    assert float(tangent) == pytest.approx(float((gx * vx).sum() + (gW * vW).sum()), rel=1e-8, abs=1e-10)


def test_constant_input_has_no_tangent():
    val, tan = jvp(lambda a, b: a * b, [np.ones(3), np.full(3, 2.0)], [np.ones(3), None])
    assert np.allclose(val, 2.0) and np.allclose(tan, 2.0)


def test_direction_shape_mismatch_raises():
    with pytest.raises(ValueError):
        jvp(lambda a: a, [np.ones(3)], [np.ones(4)])


def test_grad_of_broadcast_sum():
    v, (g,) = value_and_grad(lambda a: (a + np.ones((2, 3))).sum(), [np.zeros(3)])
    assert v == 6.0 and np.allclose(g, 2.0)


def test_stop_gradient_blocks_reverse_and_forward():
    (g,) = grad(lambda a: (stop_gradient(a) * a).sum(), [np.full(2, 3.0)])
    assert np.allclose(g, 3.0)
    _, t = jvp(lambda a: stop_gradient(a) * 2.0, [np.ones(2)], [np.ones(2)])
    assert np.allclose(t, 0.0)


def test_concat_routes_gradients():
    (ga, gb) = grad(lambda a, b: (concat([a, b], axis=-1) * np.arange(5.0)).sum(), [np.zeros(2), np.zeros(3)])
    assert np.allclose(ga, [0, 1]) and np.allclose(gb, [2, 3, 4])


def test_tuple_axis_mean():
    (g,) = grad(lambda a: a.mean(axis=(0, 1)).sum(), [np.ones((2, 3, 4))])
    assert np.allclose(g, 1.0 / 6.0)


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        with Tape():
            exp(Tensor(np.array([1000.0]), requires_grad=True))


def test_value_of_unwraps():
    assert np.allclose(value_of(Dual(np.ones(2), np.zeros(2))), 1.0)
    assert np.allclose(value_of(Tensor(np.ones(2))), 1.0)
    assert np.allclose(value_of(np.ones(2)), 1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (4,), elements=floats), arrays(float, (4,), elements=floats))
def test_division_forward_reverse_and_fd(x, v):
    f = lambda a: (a / (a * a + 1.5)).sum() + (2.0 / (a + 3.0)).sum()
    _, tangent = jvp(f, [x], [v])
    (g,) = grad(f, [x])
    assert float(tangent) == pytest.approx(float(fd_directional(f, [x], [v])), rel=1e-6, abs=1e-8)
    assert float(tangent) == pytest.approx(float((g * v).sum()), rel=1e-8, abs=1e-10)
