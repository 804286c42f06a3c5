"""Reference solvers used to generate datasets and as brute-force oracles."""
from __future__ import annotations

import dataclasses
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import grids
from . import io as tio
from .randfield import GrfParams, sample_grf

# ---------------------------------------------------------------------------
# Burgers
# ---------------------------------------------------------------------------


def _burgers_advection(uh: np.ndarray, k: np.ndarray, keep: np.ndarray, n: int) -> np.ndarray:
    """Spectral ``-d/dx (u^2 / 2)`` with the 2/3 rule applied to the product."""
    u = np.fft.irfft(uh * keep, n=n)
    return -1j * k * np.fft.rfft(0.5 * u * u) * keep


def _burgers_march(u0: np.ndarray, nu: float, save_dt: float, n_save: int, substeps: int) -> np.ndarray:
    n = u0.shape[-1]
    k = 2.0 * np.pi * np.arange(n // 2 + 1)
    keep = (np.arange(n // 2 + 1) < n / 3.0).astype(float)
    dt = save_dt / substeps
    half = (1.0 - nu * k**2 * dt / 4.0) / (1.0 + nu * k**2 * dt / 4.0)
    uh = np.fft.rfft(u0)
    out = np.empty(u0.shape[:-1] + (n_save, n))
    out[..., 0, :] = u0
    for s in range(1, n_save):
        for _ in range(substeps):
            # Strang splitting: half diffusion (Crank-Nicolson), SSP-RK3 advection, half diffusion
            uh = uh * half
            a1 = uh + dt * _burgers_advection(uh, k, keep, n)
            a2 = 0.75 * uh + 0.25 * (a1 + dt * _burgers_advection(a1, k, keep, n))
            uh = uh / 3.0 + 2.0 / 3.0 * (a2 + dt * _burgers_advection(a2, k, keep, n))
            uh = uh * half
        u = np.fft.irfft(uh, n=n)
        if not np.isfinite(u).all():
            raise FloatingPointError(f"Burgers solution blew up before t={s * save_dt:.4g}")
        out[..., s, :] = u
    return out


def burgers_substeps(u0: np.ndarray, save_dt: float, cfl: float = 0.4) -> int:
    """Sub-steps per save interval so that ``max|u0| dt / h <= cfl``."""
    n = u0.shape[-1]
    umax = max(float(np.abs(u0).max()), 0.25)
    return max(1, math.ceil(save_dt * umax * n / cfl))


def burgers_solve(
    u0: np.ndarray,
    nu: float = 0.01,
    T: float = 1.0,
    n_save: int = 128,
    substeps: int | None = None,
) -> np.ndarray:
    """Viscous Burgers ``u_t + (u^2/2)_x = nu u_xx`` on the periodic unit interval.

    Returns an array of shape ``(n_save, n)`` (or ``(batch, n_save, n)``)
    with snapshots at ``t_k = k T / (n_save - 1)``; the first snapshot is
    ``u0``. ``substeps`` fixes the number of time steps per save interval;
    by default it is chosen per sample from a CFL bound, so each trajectory
    is independent of how samples are batched.
    """
    u0 = np.asarray(u0, dtype=float)
    if nu <= 0:
        raise ValueError("nu must be positive")
    if n_save < 2:
        raise ValueError("n_save must be >= 2")
    save_dt = T / (n_save - 1)
    if substeps is not None or u0.ndim == 1:
        m = substeps or burgers_substeps(u0, save_dt)
        return _burgers_march(u0, nu, save_dt, n_save, m)
    flat = u0.reshape(-1, u0.shape[-1])
    steps = np.array([burgers_substeps(row, save_dt) for row in flat])
    out = np.empty((flat.shape[0], n_save, flat.shape[1]))
    for m in np.unique(steps):
        idx = np.flatnonzero(steps == m)
        out[idx] = _burgers_march(flat[idx], nu, save_dt, n_save, int(m))
    return out.reshape(u0.shape[:-1] + (n_save, u0.shape[-1]))


# ---------------------------------------------------------------------------
# Navier-Stokes (vorticity form)
# ---------------------------------------------------------------------------


def ns_forcing(n: int) -> np.ndarray:
    x = grids.coords(n, periodic=True)
    s = x[:, None] + x[None, :]
    return 0.1 * (np.sin(2 * np.pi * s) + np.cos(2 * np.pi * s))


def ns_velocity(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divergence-free velocity from vorticity through the streamfunction ``-lap psi = w``."""
    n = w.shape[-1]
    k = grids.wavenumbers(n)
    kx, ky = k[:, None], k[None, :]
    lap = kx**2 + ky**2
    lap[0, 0] = 1.0
    psih = np.fft.fft2(w) / lap
    psih[..., 0, 0] = 0.0
    vx = np.fft.ifft2(1j * ky * psih).real
    vy = np.fft.ifft2(-1j * kx * psih).real
    return vx, vy


def ns_vorticity_solve(
    w0: np.ndarray,
    nu: float = 1e-3,
    T: float = 1.0,
    dt: float = 1e-4,
    n_save: int = 10,
    forcing: np.ndarray | None | str = "default",
) -> np.ndarray:
    """2-D incompressible Navier-Stokes in vorticity form on the periodic unit square.

    Pseudo-spectral with 2/3 de-aliasing; diffusion is Crank-Nicolson and the
    advection and forcing terms use a Heun predictor-corrector. Returns
    ``n_save + 1`` states: ``w0`` followed by ``n_save`` snapshots equally
    spaced up to ``T``.
    """
    w0 = np.asarray(w0, dtype=float)
    n = w0.shape[-1]
    if abs(float(w0.mean(axis=(-2, -1)).max(initial=0.0))) > 1e-8 * max(1.0, float(np.abs(w0).max())):
        raise ValueError("w0 must have zero mean")
    if isinstance(forcing, str):
        forcing = ns_forcing(n)
    fh = 0.0 if forcing is None else np.fft.fft2(forcing)
    k = grids.wavenumbers(n)
    kx, ky = k[:, None], k[None, :]
    lap = kx**2 + ky**2
    lap_safe = lap.copy()
    lap_safe[0, 0] = 1.0
    kmax = 2.0 / 3.0 * np.abs(k).max()
    keep = ((np.abs(kx) <= kmax) & (np.abs(ky) <= kmax)).astype(float)
    h = 1.0 / n

    def nonlinear(wh: np.ndarray) -> np.ndarray:
        psih = wh / lap_safe
        vx = np.fft.ifft2(1j * ky * psih).real
        vy = np.fft.ifft2(-1j * kx * psih).real
        wx = np.fft.ifft2(1j * kx * wh).real
        wy = np.fft.ifft2(1j * ky * wh).real
        return -np.fft.fft2(vx * wx + vy * wy) * keep, max(np.abs(vx).max(), np.abs(vy).max())

    steps_total = int(round(T / dt))
    save_every = steps_total // n_save
    if save_every * n_save != steps_total:
        raise ValueError("T/dt must be a multiple of n_save")
    a = 0.5 * dt * nu * lap
    wh = np.fft.fft2(w0)
    out = np.empty(w0.shape[:-2] + (n_save + 1, n, n))
    out[..., 0, :, :] = w0
    warned = False
    for step in range(1, steps_total + 1):
        n1, vmax = nonlinear(wh)
        if not warned and vmax * dt / h > 1.0:
            warnings.warn(f"CFL number {vmax * dt / h:.3g} exceeds 1", RuntimeWarning)
            warned = True
        pred = ((1.0 - a) * wh + dt * (n1 + fh)) / (1.0 + a)
        n2, _ = nonlinear(pred)
        wh = ((1.0 - a) * wh + dt * (0.5 * (n1 + n2) + fh)) / (1.0 + a)
        if step % save_every == 0:
            w = np.fft.ifft2(wh).real
            if not np.isfinite(w).all():
                raise FloatingPointError(f"vorticity blew up at t={step * dt:.4g}")
            out[..., step // save_every, :, :] = w
    return out


# ---------------------------------------------------------------------------
# Elliptic problems on the unit square with homogeneous Dirichlet data
# ---------------------------------------------------------------------------


def darcy_matrix(a: np.ndarray) -> sp.csr_matrix:
    """Five-point flux-form matrix of ``-div(a grad u)`` on interior nodes.

    The grid has ``n`` nodes per axis including the boundary; face
    coefficients are arithmetic means of the adjacent nodal values.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or n < 3:
        raise ValueError("a must be a square array with at least 3 nodes per axis")
    if not (a > 0).all():
        raise ValueError("coefficient must be strictly positive")
    h2 = (1.0 / (n - 1)) ** 2
    m = n - 2
    idx = np.arange(m * m).reshape(m, m)
    ae = 0.5 * (a[1:-1, 1:-1] + a[2:, 1:-1])
    aw = 0.5 * (a[1:-1, 1:-1] + a[:-2, 1:-1])
    an = 0.5 * (a[1:-1, 1:-1] + a[1:-1, 2:])
    as_ = 0.5 * (a[1:-1, 1:-1] + a[1:-1, :-2])
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [((ae + aw + an + as_) / h2).ravel()]
    for coef, di, dj in ((ae, 1, 0), (aw, -1, 0), (an, 0, 1), (as_, 0, -1)):
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        ti, tj = ii + di, jj + dj
        ok = (ti >= 0) & (ti < m) & (tj >= 0) & (tj < m)
        rows.append(idx[ii[ok], jj[ok]])
        cols.append(idx[ti[ok], tj[ok]])
        vals.append(-coef[ok] / h2)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m * m, m * m)
    )


def solve_spd(A: sp.spmatrix, b: np.ndarray, tol: float = 1e-10, method: str = "cg") -> np.ndarray:
    """Jacobi-preconditioned CG, or a dense direct solve when ``method='dense'``."""
    if method == "dense":
        return np.linalg.solve(A.toarray(), b)
    if method != "cg":
        raise ValueError(f"unknown method {method!r}; use 'cg' or 'dense'")
    dinv = 1.0 / A.diagonal()
    M = spla.LinearOperator(A.shape, matvec=lambda v: dinv * v)
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, M=M, maxiter=20 * A.shape[0])
    if info != 0:
        raise RuntimeError(f"conjugate gradient did not converge (info={info})")
    return x


def _embed(interior: np.ndarray, n: int) -> np.ndarray:
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = interior.reshape(n - 2, n - 2)
    return u


def darcy_solve(a: np.ndarray, q: np.ndarray | float = 1.0, tol: float = 1e-10, method: str = "cg") -> np.ndarray:
    """Solve ``-div(a grad u) = q`` with ``u = 0`` on the boundary."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=float), a.shape)
    return _embed(solve_spd(darcy_matrix(a), q[1:-1, 1:-1].ravel(), tol, method), n)


def poisson_solve(q: np.ndarray, tol: float = 1e-10, method: str = "cg") -> np.ndarray:
    """Solve the five-point ``lap u = q`` with ``u = 0`` on the boundary."""
    q = np.asarray(q, dtype=float)
    return darcy_solve(np.ones_like(q), -q, tol, method)


def darcy_residual(a: np.ndarray, u: np.ndarray, q: np.ndarray | float = 1.0) -> np.ndarray:
    """Interior residual ``A u - q`` of the discrete Darcy system."""
    q = np.broadcast_to(np.asarray(q, dtype=float), np.shape(a))
    return darcy_matrix(a) @ u[1:-1, 1:-1].ravel() - q[1:-1, 1:-1].ravel()


def harmonic_extension(boundary: np.ndarray, iters: int = 100) -> np.ndarray:
    """Fill the interior by Jacobi sweeps of the 4-neighbour average; boundary pixels are held.

    Only the boundary ring of ``boundary`` is read. The interior starts at the
    mean of the boundary values.
    """
    b = np.asarray(boundary, dtype=float)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    ring = np.ones(b.shape[-2:], dtype=bool)
    ring[1:-1, 1:-1] = False
    z = b.copy()
    z[..., 1:-1, 1:-1] = b[..., ring].mean(axis=-1)[..., None, None]
    for _ in range(iters):
        z[..., 1:-1, 1:-1] = 0.25 * (z[..., 2:, 1:-1] + z[..., :-2, 1:-1] + z[..., 1:-1, 2:] + z[..., 1:-1, :-2])
    return z


def laplace_residual(z: np.ndarray) -> float:
    """Euclidean norm of the interior discrete Laplace residual (grid units)."""
    r = z[..., 2:, 1:-1] + z[..., :-2, 1:-1] + z[..., 1:-1, 2:] + z[..., 1:-1, :-2] - 4.0 * z[..., 1:-1, 1:-1]
    return float(np.sqrt((r**2).sum()))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

PDE_KINDS = ("burgers", "ns2d", "darcy", "poisson")


@dataclass
class PdeConfig:
    """Generation settings for one benchmark."""

    kind: str
    res: int
    grf: GrfParams
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return 1 if self.kind == "burgers" else 2

    @property
    def periodic(self) -> bool:
        return self.kind in ("burgers", "ns2d")

    @property
    def static(self) -> bool:
        return self.kind in ("darcy", "poisson")


def default_config(kind: str, res: int | None = None) -> PdeConfig:
    if kind == "burgers":
        res = res or 128
        return PdeConfig(
            kind,
            res,
            GrfParams(dim=1, resolution=res, alpha=2.5, tau=7.0, sigma=49.0),
            {"nu": 0.01, "T": 1.0, "n_save": 128, "solver_res": max(512, res)},
        )
    if kind == "ns2d":
        res = res or 64
        return PdeConfig(
            kind,
            res,
            GrfParams(dim=2, resolution=res, alpha=2.5, tau=7.0, sigma=None),
            {"nu": 1e-3, "T": 1.0, "dt": 1e-4, "n_save": 10},
        )
    if kind in ("darcy", "poisson"):
        res = res or 128
        return PdeConfig(kind, res, GrfParams(dim=2, resolution=res, alpha=2.0, tau=3.0, sigma=None), {})
    raise ValueError(f"unsupported pde {kind!r}; choose from {PDE_KINDS}")


@dataclass
class Dataset:
    """Inputs, targets and a 7:2:1 split.

    Time-dependent kinds store ``targets`` as trajectories
    ``(n, n_time, *grid)`` with ``inputs`` the initial states; static kinds
    store the coefficient or source field in ``inputs`` and the solution in
    ``targets``.
    """

    pde: str
    inputs: np.ndarray
    targets: np.ndarray
    splits: dict[str, np.ndarray]
    params: dict[str, Any]
    seed: int

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.inputs[idx], self.targets[idx]

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def split_indices(n: int) -> dict[str, np.ndarray]:
    """Contiguous 7:2:1 split."""
    n_train = int(round(0.7 * n))
    n_val = int(round(0.2 * n))
    n_val = min(n_val, n - n_train)
    idx = np.arange(n)
    return {
        "train": idx[:n_train],
        "val": idx[n_train : n_train + n_val],
        "test": idx[n_train + n_val :],
    }


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("STMF_THREADS", "1")))
    except ValueError:
        return 1


def _generate_chunk(cfg: PdeConfig, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    p = cfg.params
    if cfg.kind == "burgers":
        fine = dataclasses.replace(cfg.grf, resolution=p["solver_res"])
        u0f = np.stack([sample_grf(fine, start + i) for i in range(count)])
        traj = burgers_solve(u0f, p["nu"], p["T"], p["n_save"])
        stride = p["solver_res"] // cfg.res
        traj = traj[..., ::stride]
        return traj[:, 0].copy(), traj
    if cfg.kind == "ns2d":
        w0 = np.stack([sample_grf(cfg.grf, start + i) for i in range(count)])
        w0 = w0 - w0.mean(axis=(-2, -1), keepdims=True)
        traj = ns_vorticity_solve(w0, p["nu"], p["T"], p["dt"], p["n_save"])
        return w0, traj
    g = np.stack([sample_grf(cfg.grf, start + i) for i in range(count)])
    if cfg.kind == "darcy":
        a = np.exp(g)
        u = np.stack([darcy_solve(ai) for ai in a])
        return a, u
    u = np.stack([poisson_solve(qi) for qi in g])
    return g, u


def gen_dataset(cfg: PdeConfig | str, n: int, seed: int = 0, chunk: int = 64) -> Dataset:
    """Generate ``n`` samples deterministically from ``seed``.

    Sample ``i`` depends only on ``(seed, i)``; chunks may be processed by up to
    ``STMF_THREADS`` worker threads without changing the result.
    """
    if isinstance(cfg, str):
        cfg = default_config(cfg)
    if cfg.kind not in PDE_KINDS:
        raise ValueError(f"unsupported pde {cfg.kind!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = dataclasses.replace(cfg, grf=dataclasses.replace(cfg.grf, seed=seed, resolution=cfg.res))
    if cfg.kind == "burgers" and cfg.params["solver_res"] % cfg.res:
        raise ValueError("solver_res must be a multiple of res")
    starts = list(range(0, n, chunk))
    jobs = [(s, min(chunk, n - s)) for s in starts]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: _generate_chunk(cfg, *j), jobs))
    else:
        parts = [_generate_chunk(cfg, *j) for j in jobs]
    inputs = np.concatenate([p[0] for p in parts])
    targets = np.concatenate([p[1] for p in parts])
    params = {
        "res": cfg.res,
        "grf": {
            "dim": cfg.grf.dim,
            "alpha": cfg.grf.alpha,
            "tau": cfg.grf.tau,
            "sigma": cfg.grf.amplitude,
        },
        **cfg.params,
    }
    if cfg.kind == "darcy":
        params["q"] = 1.0
    return Dataset(cfg.kind, inputs, targets, split_indices(n), params, seed)


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``inputs.stmf``, ``targets.stmf`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tio.write_tensor(out / "inputs.stmf", ds.inputs)
    tio.write_tensor(out / "targets.stmf", ds.targets)
    manifest = {
        "pde": ds.pde,
        "n": ds.n,
        "seed": ds.seed,
        "params": ds.params,
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
        "files": {
            "inputs": {"path": "inputs.stmf", "sha256": tio.file_digest(out / "inputs.stmf")},
            "targets": {"path": "targets.stmf", "sha256": tio.file_digest(out / "targets.stmf")},
        },
    }
    tio.write_json(out / "manifest.json", manifest)
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    man = tio.read_json(mpath)
    return Dataset(
        man["pde"],
        tio.read_tensor(path / man["files"]["inputs"]["path"]),
        tio.read_tensor(path / man["files"]["targets"]["path"]),
        {k: np.asarray(v, dtype=int) for k, v in man["splits"].items()},
        man["params"],
        man["seed"],
    )
