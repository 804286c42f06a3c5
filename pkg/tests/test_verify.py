import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stmf import verify as V
from stmf.classical import default_config, gen_dataset
from stmf.meanflow import pde_for
from stmf.training import model_for_dataset

from conftest import TINY


def test_gronwall_limits():
    assert V.gronwall_constant(0.0, 3.0) == 1.0
    assert V.gronwall_constant(1.0, 0.5) == pytest.approx(math.sqrt(math.e - 1))
    with pytest.raises(ValueError):
        V.gronwall_constant(-1, 1)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 5), st.floats(1e-6, 5), st.floats(1.01, 2))
def test_gronwall_increasing(l, L, k):
    assert V.gronwall_constant(l * k, L) >= V.gronwall_constant(l, L)


def test_advection_identity_holds():
    assert V.check_advection_identity() < 1e-6
    assert V.check_advection_identity(c=(0.0,)) < 1e-6
    assert V.check_advection_identity(c=(0.6, -0.3)) < 1e-6


def test_identity_residual_is_second_order_in_fd_step():
    steps = [1e-2, 5e-3, 2.5e-3]
    errs = [V.check_advection_identity(step=h) for h in steps]
    assert V.loglog_slope(steps, errs)[0] == pytest.approx(2.0, abs=0.1)


def test_first_constant_scales_with_temporal_leg():
    hal = V.advection_halving(lengths=(0.1,), l_t=2.0, n=4)
    assert np.allclose(V.decoupling_sides(hal[0][1])["c1"], 12.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0, 1]))
def test_decoupling_inequality_holds_for_arbitrary_fields(seed, gamma):
    rng = np.random.default_rng(seed)
    B, n = 3, 5
    g = rng.standard_normal((B, n, 1))
    terms = V.ResidualTerms(
        m=rng.standard_normal((B, n)), dm_dtau=rng.standard_normal((B, n)), dm_dxi=rng.standard_normal((B, n, 1)),
        Kf=rng.standard_normal((B, n)), KGu=rng.standard_normal((B, n, 1)), g=g, d=rng.uniform(0.01, 1, (B, 1)),
        l_t=rng.uniform(0, 2, B) * gamma, l_s=None, gamma=gamma, g_op=np.abs(g).reshape(B, -1).max(1),
    )
    terms.l_s = np.abs(terms.d[:, 0])
    s = V.decoupling_sides(terms)
    assert np.all(V.holds(s["lhs"], s["rhs"]))


def test_advection_gap_is_fourth_order():
    hal = V.advection_halving()
    rep = V.check_decoupling([t for _, t in hal], "advection", hal)
    assert rep.violations == 0
    assert rep.slopes["gap_vs_ls"][0] == pytest.approx(4.0, abs=0.5)


def test_model_gap_orders(tiny_burgers, tiny_darcy):
    net = model_for_dataset(tiny_burgers, **TINY)
    pde = pde_for("burgers", tiny_burgers.params)
    hal = V.model_halving(net, pde, tiny_burgers.targets[:3, 4], 0.25, 0.75, (4, 2, 1))
    rep = V.check_decoupling([t for _, t in hal], "burgers", hal)
    assert rep.violations == 0 and rep.slopes["gap_vs_ls"][0] == pytest.approx(4.0, abs=0.5)

    net = model_for_dataset(tiny_darcy, **TINY)
    pde = pde_for("darcy", tiny_darcy.params)
    hal = V.model_halving(net, pde, tiny_darcy.targets[:3], 0.0, 0.0, (4, 2, 1), coef=tiny_darcy.inputs[:3])
    rep = V.check_decoupling([t for _, t in hal], "darcy", hal)
    assert rep.violations == 0 and rep.slopes["gap_vs_ls"][0] == pytest.approx(2.0, abs=0.5)


def test_oracle_midpoint_error_is_second_order():
    ls, errs = V.oracle_midpoint_errors()
    assert V.loglog_slope(ls, errs)[0] == pytest.approx(2.0, abs=0.3)


def test_aposteriori_needs_three_checkpoints():
    with pytest.raises(ValueError):
        V.check_aposteriori([1.0, 2.0], [1.0, 2.0])
    rep = V.check_aposteriori([3.0, 2.0, 1.0], [0.3, 0.2, 0.1])
    assert rep.constants["spearman"] == pytest.approx(1.0)


def test_per_point_bound_fits_constant_on_calibration_half():
    rng = np.random.default_rng(0)
    l = rng.uniform(0.1, 1, 400)
    eps = rng.uniform(0, 1e-4, 400)
    err = np.sqrt(eps) + 0.3 * l**2 * rng.uniform(0, 1, 400)
    rep = V.check_aposteriori([3, 2, 1], [3, 2, 1], err, eps, l)
    assert 0 < rep.constants["c_fit"] <= 0.3 + 1e-12
    assert rep.constants["holdout_fraction"] > 0.95


def test_synthetic_hessian_mismatch():
    J_T, J_S = V.synthetic_jacobians()
    k = V.hessian_condition(J_T, J_S, 1e-2, 1e2)
    assert k["coupled"] / k["decoupled"] > 10
    same = V.hessian_condition(J_T, J_T, 1e-2, 1e2, cross=False)
    assert same["coupled"] == same["decoupled"]


@settings(max_examples=20, deadline=None)
@given(arrays(float, (12, 4), elements=st.floats(-3, 3)), arrays(float, (12, 4), elements=st.floats(-3, 3)),
       st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_gauss_newton_matrices_symmetric_and_psd(J_T, J_S, a, b):
    H_dec, H_coup = V.gauss_newton_hessians(J_T, J_S, a, b)
    scale = max(1.0, np.abs(H_dec).max())
    assert np.abs(H_dec - H_dec.T).max() <= 1e-12 * scale and np.abs(H_coup - H_coup.T).max() <= 1e-12 * scale
    assert np.linalg.eigvalsh(H_dec).min() >= -1e-10 * scale


def test_singular_hessian_reports_infinity():
    assert V.condition_number(np.zeros((3, 3))) == float("inf")
    assert V.hessian_condition(np.zeros((5, 2)), np.zeros((5, 2)), 1, 1, restrict=False)["decoupled"] == float("inf")


def test_factor_condition_matches_eigenvalues():
    rng = np.random.default_rng(1)
    J_T, J_S = rng.standard_normal((30, 5)), rng.standard_normal((30, 5))
    H_dec, H_coup = V.gauss_newton_hessians(J_T, J_S, 0.5, 2.0)
    k = V.hessian_condition(J_T, J_S, 0.5, 2.0, restrict=False)
    assert k["decoupled"] == pytest.approx(V.condition_number(H_dec), rel=1e-8)
    assert k["coupled"] == pytest.approx(V.condition_number(H_coup), rel=1e-8)


def test_param_jacobian_matches_differences(tiny_burgers):
    net = model_for_dataset(tiny_burgers, **TINY)
    pde = pde_for("burgers", tiny_burgers.params)
    J_T, J_S, a, b = V.residual_jacobians(net, pde, tiny_burgers.targets[:1, 2], 0.1, 0.5, (2,))
    assert J_T.shape == (32, net.n_params()) and a == pytest.approx(0.4)
    P = net.param_list()
    k, eps = 5, 1e-6
    flat = np.concatenate([p.ravel() for p in P])

    def m_at(vec):
        net.set_param_list([vec[o : o + p.size].reshape(p.shape) for o, p in zip(np.cumsum([0] + [p.size for p in P]), P)])
        out = net.forward(np.roll(tiny_burgers.targets[:1, 2], 2, axis=1), np.array([0.1]), np.array([0.5]))
        return out.ravel()

    e = np.zeros_like(flat)
    e[k] = eps
    fd = (m_at(flat + e) - m_at(flat - e)) / (2 * eps)
    m_at(flat)
    assert np.abs(J_T[:, k] - fd).max() < 1e-6 * max(1.0, np.abs(fd).max())
