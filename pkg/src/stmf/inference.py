"""One-step, multi-step and spatio-temporal marching, resolution transfer and inverse Darcy."""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .classical import Dataset, PdeConfig, darcy_solve, default_config, gen_dataset, harmonic_extension
from .diffcore import Tape, Tensor, exp, value_of
from .model import MeanFlowNet
from .randfield import ood_variant
from .training import adam_init, adam_step, cosine_lr, rel_l2, static_initial_state, validate


def _check_time(t: float, T: float = 1.0) -> None:
    if not 0.0 < t <= T + 1e-12:
        warnings.warn(f"t={t} outside the trained interval (0, {T}]; extrapolating", RuntimeWarning)


def one_step(net: MeanFlowNet, u0: np.ndarray, t: float = 1.0, coef=None) -> np.ndarray:
    """``u(t) = u(0) + t m(u(0), 0, t)``; static models return ``u0 + m``."""
    u0 = np.asarray(u0, float)
    if net.cfg.static:
        return u0 + net.forward(u0, coef=coef)
    _check_time(t)
    B = u0.shape[0]
    return u0 + t * net.forward(u0, np.zeros(B), np.full(B, t), coef=coef)


def multi_step(net: MeanFlowNet, u0: np.ndarray, T: float = 1.0, N: int = 1, coef=None, t0: float = 0.0) -> np.ndarray:
    """``N`` equal steps of ``dt = T / N``; returns ``N + 1`` states stacked on axis 1."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if net.cfg.static:
        raise ValueError("multi-step marching needs a time-dependent model")
    _check_time(t0 + T)
    u = np.asarray(u0, float)
    B = u.shape[0]
    dt = T / N
    states = [u]
    for k in range(N):
        tk = t0 + k * dt
        tk1 = t0 + T if k == N - 1 else t0 + (k + 1) * dt
        m = net.forward(u, np.full(B, tk), np.full(B, tk1), coef=coef)
        u = u + (tk1 - tk) * m
        states.append(u)
    return np.stack(states, axis=1)


def step_times(T: float, N: int, t0: float = 0.0) -> np.ndarray:
    return t0 + np.arange(N + 1) * (T / N)


def generalized_multi_step(predict, u0, x0, xN, t0: float, dt: float, N: int):
    """March ``N`` segments of length ``l = sqrt(|xN - x0|^2 / N^2 + dt^2)``.

    ``predict(u, x, t, x_next, t_next)`` returns the mean flow of one segment;
    the update is ``u <- u + l m``. Returns the states, the positions and the times.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    x0, xN = np.asarray(x0, float), np.asarray(xN, float)
    dx = (xN - x0) / N
    l = math.sqrt(float(dx @ dx) + dt * dt) if dx.ndim else math.hypot(float(dx), dt)
    u = np.asarray(u0, float)
    states, xs, ts = [u], [x0], [t0]
    for k in range(N):
        x, t = x0 + k * dx, t0 + k * dt
        xn, tn = x0 + (k + 1) * dx, t0 + (k + 1) * dt
        u = u + l * np.asarray(predict(u, x, t, xn, tn))
        states.append(u)
        xs.append(xn)
        ts.append(tn)
    return np.stack(states), np.stack(xs), np.asarray(ts)


def step_sweep(net: MeanFlowNet, u0: np.ndarray, u_true: np.ndarray, steps=range(1, 17), T: float = 1.0) -> dict[int, float]:
    """Relative L2 of the ``N``-step prediction at ``T`` for each ``N``."""
    return {int(N): rel_l2(multi_step(net, u0, T, int(N))[:, -1], u_true) for N in steps}


# ---------------------------------------------------------------------------
# resolution transfer and distribution shift
# ---------------------------------------------------------------------------


def eval_dataset(net: MeanFlowNet, ds: Dataset, split: str = "test") -> float:
    x, y = ds.split(split)
    return validate(net, x, y)


def resolution_dataset(kind: str, n: int, res: int, seed: int) -> Dataset:
    cfg = default_config(kind, res)
    if kind == "burgers":
        cfg.params["solver_res"] = max(512, res)
    return gen_dataset(cfg, n, seed)


def resolution_eval(net: MeanFlowNet, kind: str, n: int, seed: int, resolutions=(128, 256, 512), base: int = 128,
                    split: str = "test") -> dict[int, float]:
    """Relative L2 on data generated at each resolution from the same seeds."""
    out = {}
    for res in resolutions:
        if res % base:
            raise ValueError(f"resolution {res} is not a multiple of the trained resolution {base}")
        out[int(res)] = eval_dataset(net, resolution_dataset(kind, n, res, seed), split)
    return out


def ood_dataset(kind: str, setting: str, n: int, seed: int, res: int | None = None) -> Dataset:
    cfg = default_config(kind, res)
    cfg = dataclasses.replace(cfg, grf=ood_variant(cfg.grf, setting))
    return gen_dataset(cfg, n, seed)


def ood_eval(net: MeanFlowNet, kind: str, settings, n: int, seed: int, res: int | None = None) -> dict[str, float]:
    """Relative L2 over all samples drawn from each shifted initial-condition generator."""
    out = {}
    for s in settings:
        ds = ood_dataset(kind, s, n, seed, res)
        out[s] = validate(net, ds.inputs, ds.targets)
    return out


# ---------------------------------------------------------------------------
# inverse Darcy
# ---------------------------------------------------------------------------


class InversionDiverged(RuntimeError):
    pass


@dataclass
class InversionResult:
    a: np.ndarray
    trace: list[float] = field(default_factory=list)
    init_a: np.ndarray | None = None


def invert_darcy(
    net: MeanFlowNet,
    u_obs: np.ndarray,
    init: str = "harmonic",
    steps: int = 2000,
    lr: float = 5e-3,
    lr_min: float = 1e-4,
    clip: float = 1.0,
    patience: int = 100,
) -> InversionResult:
    """Recover ``a = exp(z)`` from a full observation by Adam on ``|forward(a) - u_obs|^2``.

    The network input state is the harmonic extension of the boundary of
    ``u_obs``. ``init`` selects the starting log-permeability: ``"zero"`` is
    ``z = 0``; ``"harmonic"`` is the harmonic extension of ``log a = 0`` boundary
    data, i.e. the same constant field, for the Dirichlet-zero Darcy setting.
    The network parameters are never modified.
    """
    if not net.cfg.static or net.cfg.coef != "log":
        raise ValueError("inversion needs a static model with a log coefficient channel")
    u_obs = np.asarray(u_obs, float)
    if u_obs.ndim == 2:
        u_obs = u_obs[None]
    u0 = harmonic_extension(u_obs)
    if init == "zero":
        z = np.zeros_like(u_obs)
    elif init == "harmonic":
        z = harmonic_extension(np.zeros_like(u_obs))
    else:
        raise ValueError(f"unknown init {init!r}")
    plist = [p.copy() for p in net.param_list()]
    scale = 1.0 / net.norm.u_std**2
    B = u_obs.shape[0]
    zero, one = np.zeros(B), np.ones(B)
    state = adam_init([z])
    trace: list[float] = []
    init_a = np.exp(z)
    rising = 0
    for k in range(steps):
        with Tape() as tape:
            zt = Tensor(z, requires_grad=True)
            m = net.apply_features(plist, u0, zero, one, None, zt)
            r = m + (u0 - u_obs)
            loss = (r * r).mean() * scale
            (g,) = tape.gradient(loss, [zt])
        val = float(value_of(loss))
        if not math.isfinite(val):
            raise InversionDiverged(f"non-finite loss at step {k}")
        if trace and val > trace[-1]:
            rising += 1
            if rising >= patience:
                raise InversionDiverged(f"loss increased for {patience} consecutive steps (step {k})")
        else:
            rising = 0
        trace.append(val)
        (z,), state = adam_step([z], [g], state, cosine_lr(k, steps, lr, lr_min), clip)
    return InversionResult(np.exp(z), trace, init_a)


def inverse_eval(net: MeanFlowNet, a_true: np.ndarray, u_obs: np.ndarray, init: str = "harmonic", **kw) -> dict:
    res = invert_darcy(net, u_obs, init, **kw)
    return {
        "rel_l2_init": rel_l2(res.init_a, a_true),
        "rel_l2": rel_l2(res.a, a_true),
        "final_loss": res.trace[-1],
        "result": res,
    }
