import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmf.diffcore import grad, jvp
from stmf.classical import darcy_residual
from stmf.model import (
    Checkpoint, MeanFlowNet, ModelConfig, Normalizer, config_for, load_checkpoint, param_count, reference_solution, save_checkpoint,
)

from conftest import TINY

NORM = Normalizer(u_mean=0.1, u_std=0.8, m_scale=2.0)


def small(kind="burgers", **kw):
    base = dict(width=6, depth=2, modes=4, proj_width=8, pool=4)
    return MeanFlowNet(config_for(kind, **{**base, **kw}), NORM if kind == "burgers" else Normalizer(coef_std=0.5))


def test_in_channel_count():
    cfg = ModelConfig(ndim=1, fourier_features=2, coord_input=True)
    assert cfg.in_channels == 1 + 3 + 1 + 1 * (1 + 4)
    assert ModelConfig(ndim=2, static=True, coef="log", fourier_features=0).in_channels == 2 + 2 + 1 + 2


def test_param_count_matches_arrays():
    net = small()
    assert net.n_params() == param_count(net.params) == sum(p.size for p in net.param_list())


def test_tiny_burgers_model_fits_dense_study():
    net = small(**TINY)
    assert net.n_params() <= 200


def test_same_seed_same_init():
    assert all(np.array_equal(a, b) for a, b in zip(small().param_list(), small().param_list()))
    assert not np.array_equal(small(seed=1).param_list()[0], small().param_list()[0])


def _inputs(B=2, n=32, seed=0):
    rng = np.random.default_rng(seed)
    U = np.sin(2 * np.pi * (np.arange(n) / n + rng.uniform(0, 1, (B, 1)))) * rng.uniform(0.5, 2, (B, 1))
    return U, rng.uniform(0, 0.5, B), rng.uniform(0.5, 1, B)


def test_jvp_tau_and_u_match_central_differences():
    net = small()
    U, tau, t = _inputs()
    _, dtau = net.forward_jvp_tau(U, tau, t)
    eps = 1e-6
    fd = (net.forward(U, tau + eps, t) - net.forward(U, tau - eps, t)) / (2 * eps)
    assert np.abs(dtau - fd).max() <= 1e-6 * np.abs(fd).max()
    v = np.cos(2 * np.pi * np.arange(32) / 32)[None].repeat(2, 0)
    _, du = net.forward_jvp_u(v, U, tau, t)
    fd = (net.forward(U + eps * v, tau, t) - net.forward(U - eps * v, tau, t)) / (2 * eps)
    assert np.abs(du - fd).max() <= 1e-6 * np.abs(fd).max()


def test_parameter_gradient_matches_forward_mode():
    net = small()
    U, tau, t = _inputs()
    w = np.random.default_rng(3).standard_normal(U.shape)
    loss = lambda *P: (net.apply(list(P), U, tau, t) * w).sum()
    gs = grad(loss, net.param_list())
    rng = np.random.default_rng(4)
    dirs = [rng.standard_normal(p.shape) for p in net.param_list()]
    _, tan = jvp(loss, net.param_list(), dirs)
    assert float(tan) == pytest.approx(sum(float((g * d).sum()) for g, d in zip(gs, dirs)), rel=1e-8)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 31))
def test_periodic_backbone_is_translation_equivariant(shift):
    net = small(fourier_features=0, global_pool=False, coord_input=False)
    U, tau, t = _inputs()
    out = net.forward(U, tau, t)
    assert np.allclose(net.forward(np.roll(U, shift, axis=1), tau, t), np.roll(out, shift, axis=1), atol=1e-12)


def test_spatial_query_changes_output():
    net = small()
    U, tau, t = _inputs()
    assert not np.allclose(net.forward(U, t, t, d=np.full((2, 1), 1 / 32)), net.forward(U, t, t))


def test_static_model_needs_coefficient():
    net = small("darcy")
    U = np.zeros((1, 8, 8))
    with pytest.raises(ValueError):
        net.forward(U)
    assert net.forward(U, coef=np.ones((1, 8, 8))).shape == (1, 8, 8)


def test_reference_solution_offsets_forward_queries_only():
    plain, ref = small("darcy", reference=False), small("darcy", reference=True)
    ref.params = plain.params
    U, a = np.zeros((2, 12, 12)), np.exp(0.1 * np.random.default_rng(0).standard_normal((2, 12, 12)))
    base = reference_solution("log", 12, ref.norm.coef_mean)
    assert np.allclose(ref.forward(U, coef=a) - plain.forward(U, coef=a), base, atol=1e-14)
    d = np.full((2, 2), 1 / 11)
    assert np.array_equal(ref.forward(U, d=d, coef=a), plain.forward(U, d=d, coef=a))
    assert np.abs(darcy_residual(np.ones((12, 12)), base)).max() < 1e-7
    with pytest.raises(ValueError):
        config_for("burgers", reference=True)


@pytest.mark.parametrize("K", [2, 4])
def test_band_limited_coefficient_ignores_high_modes(K):
    net = small("darcy", global_pool=False, coef_modes=K)
    U = np.zeros((1, 16, 16))
    x = np.arange(16) / 15
    high = np.cos(2 * np.pi * 7 * x)[:, None] * np.ones(16)
    a = np.exp(0.2 * np.sin(2 * np.pi * x)[:, None] * np.ones(16))
    # a mode outside the retained band is nearly invisible to the network
    base = net.forward(U, coef=a)
    assert np.abs(net.forward(U, coef=a * np.exp(0.1 * high)) - base).max() < 0.1 * np.abs(base).max()


def test_resolution_independent_parameters():
    net = small()
    U, tau, t = _inputs(n=64)
    assert net.forward(U, tau, t).shape == (2, 64)


def test_checkpoint_roundtrip(tmp_path):
    net = small()
    ck = Checkpoint(net, epoch=3, step=30, best_val=0.5, seed=0, opt_state={"t": 30, "m": net.params, "v": net.params})
    save_checkpoint(ck, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    U, tau, t = _inputs()
    assert np.array_equal(back.net.forward(U, tau, t), net.forward(U, tau, t))
    assert back.config_hash() == ck.config_hash() and back.epoch == 3 and back.opt_state["t"] == 30
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none")


def test_bad_config():
    with pytest.raises(ValueError):
        ModelConfig(ndim=3)
    with pytest.raises(ValueError):
        config_for("heat")
