import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmf import grids
from stmf.meanflow import (
    NeumannDivergence, PdeSpec, Predictor, SegmentFields, path_length, pde_for, reconstruct_state,
    second_order_constraint, spatial_residual, spatial_residual_fields, st_residual_fields, temporal_residual,
    temporal_residual_fields, total_loss,
)

N = 65
X = grids.coords(N, False)
ADV = PdeSpec("advection", c=(1.0,), bounded=True)


def coordinate_flow(u):
    """Exact spatial mean flow of a fixed profile: ``(u(x) - u(x - d)) / d``."""
    def fn(params, U, tau, t, d, coef):
        dd = d[:, 0][:, None]
        return (u(X)[None] - u(X[None] - dd)) / dd
    return Predictor(fn, [])


@pytest.mark.parametrize("u", [lambda z: 2 * z + 1, lambda z: z**2 - z, lambda z: z**3])
@pytest.mark.parametrize("s", [2, 4])
def test_spatial_residual_vanishes_for_exact_flow(u, s):
    seg = SegmentFields(coordinate_flow(u), ADV, u(X)[None], 0.3, 0.3, (s,))
    r = spatial_residual_fields(seg)[..., 0][seg.mask]
    # FD gradient is exact up to quadratics; cubic leaves an O(h^2) gradient error
    assert np.abs(r).max() < 1e-3 * seg.l_s[0] ** 1


@pytest.mark.parametrize("s", [2, 3, 4])
def test_second_order_constraint_cubic_oracle(s):
    cube = lambda z: z**3
    seg = SegmentFields(coordinate_flow(cube), ADV, cube(X)[None], 0.0, 0.0, (s,))
    xi = X - s / (N - 1)
    lap = second_order_constraint(seg)[0]
    interior = seg.mask[0].copy()
    interior[:s + 2] = False
    interior[-2:] = False
    assert np.abs(lap - 6 * xi)[interior].max() < 1e-6
    # doubling the curvature term of m breaks the cubic case
    doubled = lap - seg.l[0] * seg.lap_m[0]
    assert np.abs(doubled - 6 * xi)[interior].max() > 1e-2


def test_second_order_constraint_quadratic_cannot_distinguish():
    quad = lambda z: z**2
    seg = SegmentFields(coordinate_flow(quad), ADV, quad(X)[None], 0.0, 0.0, (2,))
    lap = second_order_constraint(seg)[0][seg.mask[0]][2:-2]
    assert np.allclose(lap, 2.0, atol=1e-8)
    assert np.allclose(seg.lap_m[0][seg.mask[0]][2:-2], 0.0, atol=1e-6)


def similarity_flow():
    """Exact mean flow of ``u = a x / (1 + a t)`` under inviscid-free Burgers for linear anchors.

    For ``U = a x`` the state after ``l_t`` is ``U / (1 + a l_t)``, so
    ``m = -U a / (1 + a l_t)`` with ``a = dU/dx``; viscosity does not act on
    linear fields.
    """
    M = np.stack([grids.fd_grad(np.eye(N)[j][None], 1)[0, :, 0] for j in range(N)])

    def fn(params, U, tau, t, d, coef):
        a = U @ M
        lt = (t - tau).reshape(-1, 1) if hasattr(t - tau, "reshape") else t - tau
        return -(U * a) / (a * lt + 1.0)
    return Predictor(fn, [])


@pytest.mark.parametrize("a", [0.5, 1.0, -0.4])
def test_temporal_residual_vanishes_on_similarity_solution(a):
    pde = PdeSpec("burgers", nu=0.01, bounded=True)
    tau, t = np.array([0.2]), np.array([0.9])
    U = (a / (1 + a * tau[0]) * X)[None]
    seg = SegmentFields(similarity_flow(), pde, U, tau, t)
    assert np.abs(temporal_residual_fields(seg)).max() < 1e-10
    assert np.abs(st_residual_fields(seg)).max() < 1e-10
    truth = (a / (1 + a * t[0]) * X)[None]
    assert np.allclose(reconstruct_state(U, seg.m, seg.l_t), truth)


def test_training_temporal_residual_matches_field_form():
    pde = PdeSpec("burgers", nu=0.01, bounded=True)
    U = (0.7 * X)[None]
    r, m = temporal_residual(similarity_flow(), pde, U, np.array([0.1]), np.array([0.6]))
    assert np.abs(r).max() < 1e-10


def test_neumann_divergence_detected():
    def fn(params, U, tau, t, d, coef):
        return U * 10.0
    seg = SegmentFields(Predictor(fn, []), ADV, X[None], 0.0, 1.0)
    with pytest.raises(NeumannDivergence):
        seg.K_inv(np.ones((1, N)))


def test_neumann_series_inverts_small_K():
    def fn(params, U, tau, t, d, coef):
        return U * 0.1
    seg = SegmentFields(Predictor(fn, []), ADV, X[None], 0.0, 0.5)
    v = np.ones((1, N))
    approx = seg.K_inv(v, order=8)
    assert np.allclose(approx, v / 1.05, rtol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 3), st.floats(0, 3))
def test_path_length_is_euclidean(xi, x, tau, dt):
    seg = path_length([xi], tau, [x], tau + dt)
    assert seg.l == pytest.approx(np.hypot(x - xi, seg.l_t))
    assert seg.l >= max(abs(seg.l_t), seg.l_s) - 1e-12


def test_path_length_rejects_nan():
    with pytest.raises(ValueError):
        path_length([np.nan], 0.0, [0.0], 1.0)


def test_reconstruct_state_shapes():
    with pytest.raises(ValueError):
        reconstruct_state(np.zeros((2, 4)), np.zeros((2, 5)), 1.0)
    out = reconstruct_state(np.zeros((2, 3)), np.ones((2, 3)), np.array([1.0, 2.0]))
    assert np.array_equal(out[:, 0], [1.0, 2.0])


def test_total_loss_weights():
    assert total_loss(1.0, 2.0, 3.0, 0.01, 0.01, gamma=1) == pytest.approx(1.05)
    assert total_loss(1.0, 2.0, 3.0, 0.01, 0.01, gamma=0) == pytest.approx(1.03)
    assert total_loss(1.0, None, None) == 1.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.0, lam_t=-1)


def test_spatial_residual_needs_shift():
    with pytest.raises(ValueError):
        spatial_residual(coordinate_flow(lambda z: z), ADV, X[None], 0.0, (0,))


def test_rhs_splits():
    u = np.sin(2 * np.pi * grids.coords(32, True))[None]
    burg = pde_for("burgers", {"nu": 0.01})
    lap = burg.laplacian(u)
    assert np.allclose(burg.rhs(u), -u * burg.grad(u)[..., 0] + 0.01 * lap)
    assert np.allclose((burg.advective_coeff(u) * burg.grad(u)).sum(-1) + burg.remainder(u, lap), burg.rhs(u))
    assert pde_for("darcy").gamma == 0 and pde_for("burgers").gamma == 1
