import numpy as np
import pytest

from stmf.classical import (
    burgers_solve, darcy_matrix, darcy_residual, darcy_solve, default_config, gen_dataset, harmonic_extension,
    laplace_residual, load_dataset, ns_velocity, ns_vorticity_solve, poisson_solve, save_dataset, solve_spd, split_indices,
)
from stmf.grids import coords


def _eigen_case(n):
    x = coords(n, False)
    X, Y = np.meshgrid(x, x, indexing="ij")
    u = np.sin(np.pi * X) * np.sin(np.pi * Y)
    return u, -2 * np.pi**2 * u


def test_poisson_eigenfunction_second_order():
    errs = []
    for n in (17, 33, 65):
        u, q = _eigen_case(n)
        errs.append(np.abs(poisson_solve(q) - u).max())
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2) < 0.2)


def test_darcy_cg_matches_dense():
    rng = np.random.default_rng(0)
    a = np.exp(rng.standard_normal((16, 16)))
    assert np.abs(darcy_solve(a, method="cg") - darcy_solve(a, method="dense")).max() <= 1e-10


def test_darcy_residual_vanishes_at_solution():
    a = np.exp(np.random.default_rng(1).standard_normal((12, 12)) * 0.3)
    u = darcy_solve(a)
    assert np.abs(darcy_residual(a, u)).max() < 1e-7
    assert np.all(u[0] == 0) and np.all(u[:, -1] == 0)


def test_darcy_matrix_symmetric_positive():
    A = darcy_matrix(np.ones((8, 8))).toarray()
    assert np.allclose(A, A.T)
    assert np.linalg.eigvalsh(A).min() > 0


def test_solve_spd_rejects_unknown_method():
    with pytest.raises(ValueError):
        solve_spd(darcy_matrix(np.ones((5, 5))), np.ones(9), method="lu")


def test_harmonic_extension_keeps_linear_fields():
    x = coords(9, False)
    X, Y = np.meshgrid(x, x, indexing="ij")
    lin = 1 + 2 * X - Y
    z = harmonic_extension(lin, iters=400)
    assert np.abs(z - lin).max() < 1e-8
    assert laplace_residual(z) < 1e-8


def test_burgers_conserves_mean_and_decays_energy():
    x = coords(128, True)
    u0 = np.sin(2 * np.pi * x) + 0.5
    traj = burgers_solve(u0, nu=0.01, T=0.5, n_save=6)
    assert traj.shape == (6, 128)
    assert np.allclose(traj.mean(-1), 0.5, atol=1e-12)
    energy = ((traj - 0.5) ** 2).sum(-1)
    assert np.all(np.diff(energy) < 0)


def test_burgers_batch_matches_single():
    x = coords(64, True)
    u0 = np.stack([np.sin(2 * np.pi * x), 3 * np.cos(2 * np.pi * x)])
    both = burgers_solve(u0, T=0.2, n_save=3)
    assert np.array_equal(both[1], burgers_solve(u0[1], T=0.2, n_save=3))


def test_burgers_time_refinement_order():
    x = coords(128, True)
    u0 = np.sin(2 * np.pi * x)
    sols = [burgers_solve(u0, T=0.2, n_save=2, substeps=m)[-1] for m in (20, 40, 80)]
    order = np.log2(np.abs(sols[0] - sols[1]).max() / np.abs(sols[1] - sols[2]).max())
    assert order >= 1.8


def test_ns_single_mode_decays_like_stokes():
    n, nu, T = 32, 1e-2, 0.5
    x = coords(n, True)
    X, Y = np.meshgrid(x, x, indexing="ij")
    w0 = np.cos(2 * np.pi * X)  # a single Fourier mode is an exact steady advection state
    traj = ns_vorticity_solve(w0, nu=nu, T=T, dt=1e-3, n_save=2, forcing=None)
    ratio = np.abs(traj[-1]).max() / np.abs(w0).max()
    assert ratio == pytest.approx(np.exp(-nu * 4 * np.pi**2 * T), rel=1e-2)


def test_ns_velocity_is_divergence_free():
    n = 32
    x = coords(n, True)
    X, Y = np.meshgrid(x, x, indexing="ij")
    w = np.sin(2 * np.pi * X) * np.cos(4 * np.pi * Y)
    vx, vy = ns_velocity(w)
    k = np.fft.fftfreq(n, 1.0 / n) * 2j * np.pi
    div = np.fft.ifft2(k[:, None] * np.fft.fft2(vx) + k[None, :] * np.fft.fft2(vy)).real
    assert np.abs(div).max() < 1e-10


def test_ns_requires_zero_mean():
    with pytest.raises(ValueError):
        ns_vorticity_solve(np.ones((8, 8)), n_save=1, T=1e-3, dt=1e-3)


def test_split_ratio():
    s = split_indices(10)
    assert [len(s[k]) for k in ("train", "val", "test")] == [7, 2, 1]
    assert len(split_indices(732)["train"]) == 512


def test_burgers_defaults():
    cfg = default_config("burgers")
    assert (cfg.res, cfg.grf.alpha, cfg.grf.tau, cfg.grf.amplitude) == (128, 2.5, 7.0, 49.0)
    assert cfg.params["nu"] == 0.01 and cfg.params["T"] == 1.0


def test_generation_is_deterministic_and_chunk_invariant(tmp_path):
    a = gen_dataset(default_config("darcy", 16), 5, seed=3, chunk=2)
    b = gen_dataset(default_config("darcy", 16), 5, seed=3, chunk=64)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)
    save_dataset(a, tmp_path / "d")
    c = load_dataset(tmp_path / "d")
    assert np.array_equal(c.targets, a.targets) and c.params == a.params
    assert np.all(a.inputs > 0)


def test_load_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "none")
