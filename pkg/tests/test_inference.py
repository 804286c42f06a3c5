import warnings

import numpy as np
import pytest

from stmf.inference import generalized_multi_step, invert_darcy, multi_step, one_step, step_times
from stmf.training import model_for_dataset

from conftest import TINY


class ExactDecay:
    """Stands in for a model whose mean flow is exact for ``u' = -u``."""

    class cfg:
        static = False

    def forward(self, u, tau, t, coef=None):
        lt = (t - tau)[:, None]
        return u * (np.exp(-lt) - 1) / lt


def test_multi_step_with_exact_flow_is_exact_for_any_N():
    u0 = np.ones((1, 4))
    for N in (1, 3, 7):
        traj = multi_step(ExactDecay(), u0, T=1.0, N=N)
        assert traj.shape == (1, N + 1, 4)
        assert np.allclose(traj[:, -1], np.exp(-1.0))
        assert np.allclose(traj[0, :, 0], np.exp(-step_times(1.0, N)))


def test_multi_step_rejects_zero_steps():
    with pytest.raises(ValueError):
        multi_step(ExactDecay(), np.ones((1, 2)), N=0)


def test_generalized_marching_follows_a_linear_field():
    # u(x, t) = x + 2t has constant mean flow (dx + 2 dt) / l on every segment
    def predict(u, x, t, xn, tn):
        l = np.hypot(xn - x, tn - t)
        return ((xn - x) + 2 * (tn - t)) / l

    states, xs, ts = generalized_multi_step(predict, np.array(0.0), 0.0, 1.0, 0.0, 0.25, 4)
    assert np.allclose(states, xs + 2 * ts)
    assert ts[-1] == pytest.approx(1.0)


def test_extrapolation_warns(tiny_burgers):
    net = model_for_dataset(tiny_burgers, **TINY)
    with pytest.warns(RuntimeWarning):
        one_step(net, tiny_burgers.inputs[:1], t=1.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        one_step(net, tiny_burgers.inputs[:1], t=1.0)


def test_inversion_leaves_model_untouched(tiny_darcy):
    net = model_for_dataset(tiny_darcy, **TINY)
    before = [p.copy() for p in net.param_list()]
    res = invert_darcy(net, tiny_darcy.targets[:2], steps=5)
    assert res.a.shape == tiny_darcy.targets[:2].shape and len(res.trace) == 5
    assert np.all(res.a > 0) and np.allclose(res.init_a, 1.0)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.param_list()))


def test_inversion_needs_log_coefficient_model(tiny_burgers):
    with pytest.raises(ValueError):
        invert_darcy(model_for_dataset(tiny_burgers, **TINY), np.zeros((1, 8, 8)))
