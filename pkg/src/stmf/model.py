"""Mean-flow predictor: a small smooth operator network.

Per-point inputs are the normalized anchor state, an optional coefficient
channel, the times ``tau``, ``t`` and ``t - tau`` (dynamic problems), the
anchor displacement, and sinusoidal coordinate features. A global encoding of
the anchor state, average-pooled to a fixed size, is added after the lifting
layer. Hidden blocks are ``tanh(h W + S(h) + b)`` where ``S`` projects on a
fixed truncated Fourier basis, mixes the retained modes, and synthesizes back.
Projections use ``1/n`` quadrature weights, so parameter shapes and the
learned operator do not depend on the grid resolution.

Everything is written against diffcore primitives and runs on arrays,
reverse-mode tensors and forward-mode duals.
"""
from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import grids
from . import io as tio
from .diffcore import broadcast_to, concat, jvp, tanh, value_of
from .meanflow import Predictor


@dataclass(frozen=True)
class ModelConfig:
    ndim: int = 1
    periodic: bool = True
    static: bool = False
    coef: str | None = None  # None, "log" (positive coefficient) or "linear"
    width: int = 32
    depth: int = 3
    modes: int = 12
    fourier_features: int = 4
    pool: int = 16
    proj_width: int = 64
    d_scale: float = 16.0
    time_embed: int = 0
    residual: bool = False
    linear_last: bool = False
    global_pool: bool = True
    coord_input: bool = True
    spectral_init: float = 1.0
    coef_modes: int = 0  # >0: band-limit the coefficient channel to this many modes per axis
    reference: bool = False  # static forward queries add the mean-coefficient solution
    seed: int = 0

    def __post_init__(self):
        if self.ndim not in (1, 2):
            raise ValueError("ndim must be 1 or 2")
        if self.depth < 1:
            raise ValueError("at least one hidden block is required")
        if self.coef not in (None, "log", "linear"):
            raise ValueError(f"unknown coefficient transform {self.coef!r}")
        if self.reference and not (self.static and self.coef):
            raise ValueError("a reference solution needs a static model with a coefficient channel")

    @property
    def in_channels(self) -> int:
        c = 1 + (self.coef is not None)
        c += 0 if self.static else 3
        c += self.ndim + (1 if self.static else 0)
        c += self.ndim * (int(self.coord_input) + 2 * self.fourier_features)
        return c

    @property
    def pooled_channels(self) -> int:
        return (1 + (self.coef is not None)) * self.pool**self.ndim


# periodic problems keep the backbone translation-equivariant: no positional
# Fourier features and no fixed-position pooled encoding
_PERIODIC = dict(fourier_features=0, global_pool=False, depth=4, time_embed=32)


def config_for(kind: str, **overrides) -> ModelConfig:
    base = {
        "burgers": dict(ndim=1, periodic=True, static=False, modes=16, **_PERIODIC),
        "ns2d": dict(ndim=2, periodic=True, static=False, modes=8, **_PERIODIC),
        "darcy": dict(ndim=2, periodic=False, static=True, coef="log", modes=8, pool=8,
                      global_pool=False, coef_modes=6, reference=True),
        "poisson": dict(ndim=2, periodic=False, static=True, coef="linear", modes=8, pool=8),
        "advection": dict(ndim=1, periodic=True, static=False, modes=8, **_PERIODIC),
    }
    if kind not in base:
        raise ValueError(f"no model config for {kind!r}")
    return ModelConfig(**{**base[kind], **overrides})


@dataclass
class Normalizer:
    """Training-split statistics frozen into the checkpoint."""

    u_mean: float = 0.0
    u_std: float = 1.0
    m_scale: float = 1.0
    coef_mean: float = 0.0
    coef_std: float = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], float]]:
    """Name, shape and uniform init bound of every parameter, in order."""
    C = cfg.width
    shapes = [
        ("lift_w", (cfg.in_channels, C), np.sqrt(3.0 / cfg.in_channels)),
        ("lift_b", (C,), 0.0),
    ]
    if cfg.global_pool:
        shapes.append(("glob_w", (cfg.pooled_channels, C), np.sqrt(3.0 / cfg.pooled_channels)))
    if cfg.time_embed and not cfg.static:
        shapes.append(("temb_w", (3, cfg.time_embed), np.sqrt(3.0)))
        shapes.append(("temb_b", (cfg.time_embed,), 0.0))
    for i in range(cfg.depth):
        if cfg.time_embed and not cfg.static:
            shapes.append((f"blk{i}_t", (cfg.time_embed, C), np.sqrt(3.0 / cfg.time_embed)))
        shapes.append((f"blk{i}_w", (C, C), np.sqrt(3.0 / C)))
        shapes.append((f"blk{i}_b", (C,), 0.0))
        if cfg.ndim == 1:
            shapes.append((f"blk{i}_sr", (cfg.modes, C, C), cfg.spectral_init / C))
            shapes.append((f"blk{i}_si", (cfg.modes, C, C), cfg.spectral_init / C))
        else:
            M = 2 * cfg.modes - 1
            shapes.append((f"blk{i}_s", (C, M, M), 1.0))
    shapes += [
        ("proj_w", (C, cfg.proj_width), np.sqrt(3.0 / C)),
        ("proj_b", (cfg.proj_width,), 0.0),
        ("out_w", (cfg.proj_width, 1), 0.1 * np.sqrt(3.0 / cfg.proj_width)),
        ("out_b", (1,), 0.0),
    ]
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name, shape, bound in _param_shapes(cfg):
        out[name] = rng.uniform(-bound, bound, size=shape) if bound > 0 else np.zeros(shape)
    return out


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(np.asarray(value_of(p)).size for p in params.values()))


@functools.lru_cache(maxsize=64)
def _coord_features(n: int, ndim: int, periodic: bool, F: int, raw: bool = True) -> np.ndarray:
    x = grids.coords(n, periodic)
    k = np.arange(1, F + 1)
    parts = [x[:, None]] if raw else []
    parts += [np.sin(2 * np.pi * x[:, None] * k), np.cos(2 * np.pi * x[:, None] * k)]
    per_axis = np.concatenate(parts, axis=1)
    if ndim == 1:
        return per_axis
    a = np.broadcast_to(per_axis[:, None, :], (n, n, per_axis.shape[1]))
    b = np.broadcast_to(per_axis[None, :, :], (n, n, per_axis.shape[1]))
    return np.concatenate([a, b], axis=-1)


@functools.lru_cache(maxsize=64)
def _basis_1d(n: int, periodic: bool, K: int) -> tuple[np.ndarray, np.ndarray]:
    x = grids.coords(n, periodic)
    ang = 2 * np.pi * np.outer(x, np.arange(K))
    return np.cos(ang), np.sin(ang)


@functools.lru_cache(maxsize=64)
def _basis_real(n: int, periodic: bool, K: int) -> np.ndarray:
    """``[cos(2 pi k x) for k < K] + [sin(2 pi k x) for 1 <= k < K]``, shape ``(n, 2K-1)``."""
    c, s = _basis_1d(n, periodic, K)
    return np.concatenate([c, s[:, 1:]], axis=1)


@functools.lru_cache(maxsize=64)
def _lowpass_projector(n: int, periodic: bool, K: int) -> np.ndarray:
    """Symmetric least-squares projector onto the first ``K`` modes, shape ``(n, n)``."""
    Phi = _basis_real(n, periodic, K)
    return Phi @ np.linalg.pinv(Phi)


@functools.lru_cache(maxsize=16)
def reference_solution(coef: str, n: int, level: float) -> np.ndarray:
    """Steady solution for the spatially constant coefficient ``level`` (in feature space).

    ``coef="log"`` is Darcy with ``a = exp(level)``; ``coef="linear"`` is
    Poisson with source ``level``.
    """
    from .classical import darcy_solve, poisson_solve

    if coef == "log":
        u = darcy_solve(np.full((n, n), math.exp(level)))
    else:
        u = poisson_solve(np.full((n, n), level))
    u.setflags(write=False)
    return u


class MeanFlowNet:
    """Network definition plus frozen normalization statistics."""

    def __init__(self, cfg: ModelConfig, norm: Normalizer | None = None, params: dict | None = None):
        self.cfg = cfg
        self.norm = norm or Normalizer()
        self.params = params if params is not None else init_params(cfg)
        self.names = [name for name, _, _ in _param_shapes(cfg)]
        missing = set(self.names) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")

    # ------------------------------------------------------------------
    def param_list(self) -> list[np.ndarray]:
        return [self.params[n] for n in self.names]

    def set_param_list(self, values) -> None:
        self.params = {n: np.asarray(v, float) for n, v in zip(self.names, values)}

    def n_params(self) -> int:
        return param_count(self.params)

    def coef_feature(self, coef: np.ndarray) -> np.ndarray:
        """Un-normalized coefficient channel (``log a`` or ``q``)."""
        coef = np.asarray(coef, float)
        return np.log(coef) if self.cfg.coef == "log" else coef

    def predictor(self, coef=None, params=None) -> Predictor:
        p = list(params) if params is not None else self.param_list()
        return Predictor(self.apply, p, coef)

    # ------------------------------------------------------------------
    def apply(self, plist, U, tau, t, d=None, coef=None):
        """Mean flow ``m`` on the grid of ``U``; see :class:`meanflow.Predictor`."""
        feat = None
        if self.cfg.coef is not None:
            if coef is None:
                raise ValueError("this model needs a coefficient field")
            feat = self.coef_feature(coef)
        return self.apply_features(plist, U, tau, t, d, feat)

    def apply_features(self, plist, U, tau, t, d=None, coef_feature=None):
        """As :meth:`apply`, with the coefficient already transformed (differentiable input)."""
        cfg, nm = self.cfg, self.norm
        P = dict(zip(self.names, plist))
        shape = np.shape(value_of(U))
        B, grid = shape[0], shape[1:]
        if len(grid) != cfg.ndim or any(g != grid[0] for g in grid):
            raise ValueError(f"expected a square {cfg.ndim}-D grid, got {shape}")
        n = grid[0]
        if cfg.global_pool and n % cfg.pool:
            raise ValueError(f"grid size {n} is not a multiple of the pooled size {cfg.pool}")
        col = (B,) + grid + (1,)
        un = (U - nm.u_mean) * (1.0 / nm.u_std)
        chans = [un.reshape(col)]
        pooled_src = [un]
        if cfg.coef is not None:
            if coef_feature is None:
                raise ValueError("this model needs a coefficient field")
            cn = (coef_feature - nm.coef_mean) * (1.0 / nm.coef_std)
            if cfg.coef_modes:
                cn = self._band_limit(cn, n)
            chans.append(cn.reshape(col))
            pooled_src.append(cn)
        bshape = (B,) + (1,) * cfg.ndim + (1,)
        temb = None
        if not cfg.static:
            tau_b = _per_sample(tau, B)
            t_b = _per_sample(t, B)
            tau_c = broadcast_to(tau_b.reshape(bshape), col)
            t_c = broadcast_to(t_b.reshape(bshape), col)
            lt_c = broadcast_to((t_b - tau_b).reshape(bshape), col)
            chans += [tau_c, t_c, lt_c]
            if cfg.time_embed:
                times = concat([tau_b.reshape(B, 1), t_b.reshape(B, 1), (t_b - tau_b).reshape(B, 1)], axis=-1)
                temb = tanh(times @ P["temb_w"] + P["temb_b"])
        dvec = np.zeros((B, cfg.ndim)) if d is None else np.asarray(d, float).reshape(B, cfg.ndim)
        chans.append(np.broadcast_to((cfg.d_scale * dvec).reshape((B,) + (1,) * cfg.ndim + (cfg.ndim,)), (B,) + grid + (cfg.ndim,)))
        if cfg.static:
            chans.append(np.full(col, 0.0 if d is None else 1.0))
        cf = _coord_features(n, cfg.ndim, cfg.periodic, cfg.fourier_features, cfg.coord_input)
        if cf.shape[-1]:
            chans.append(np.broadcast_to(cf, (B,) + cf.shape))
        x = concat(chans, axis=-1)

        lifted = x @ P["lift_w"] + P["lift_b"]
        if cfg.global_pool:
            lifted = lifted + self._global(pooled_src, P, B, n)
        h = tanh(lifted)


        cshape = (B,) + (1,) * cfg.ndim + (cfg.width,)
        for i in range(cfg.depth):
            z = h @ P[f"blk{i}_w"] + self._spectral(h, P, i, n) + P[f"blk{i}_b"]
            if temb is not None:
                z = z + (temb @ P[f"blk{i}_t"]).reshape(cshape)
            if cfg.linear_last and i == cfg.depth - 1:
                h = z
            else:
                h = h + tanh(z) if cfg.residual else tanh(z)
        q = tanh(h @ P["proj_w"] + P["proj_b"])
        out = (q @ P["out_w"] + P["out_b"]).reshape((B,) + grid) * nm.m_scale
        if cfg.reference and d is None:
            out = out + reference_solution(cfg.coef, n, nm.coef_mean)
        return out

    def _band_limit(self, c, n: int):
        Q = _lowpass_projector(n, self.cfg.periodic, self.cfg.coef_modes)
        if self.cfg.ndim == 1:
            return c @ Q
        nd = len(np.shape(value_of(c)))
        swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
        return ((c @ Q).transpose(*swap) @ Q).transpose(*swap)

    def _global(self, pooled_src, P, B: int, n: int):
        """Average-pool the anchor channels to a fixed size and project to the hidden width."""
        cfg = self.cfg
        k = n // cfg.pool
        pooled = []
        for src in pooled_src:
            if cfg.ndim == 1:
                pooled.append(src.reshape(B, cfg.pool, k).mean(axis=2))
            else:
                pooled.append(src.reshape(B, cfg.pool, k, cfg.pool, k).mean(axis=(2, 4)).reshape(B, cfg.pool * cfg.pool))
        g = concat(pooled, axis=-1) @ P["glob_w"]
        return g.reshape((B,) + (1,) * cfg.ndim + (cfg.width,))

    def _spectral(self, h, P, i, n):
        cfg = self.cfg
        B = np.shape(value_of(h))[0]
        C = cfg.width
        if cfg.ndim == 1:
            Ec, Es = _basis_1d(n, cfg.periodic, cfg.modes)
            hT = h.transpose(0, 2, 1)  # (B, C, n)
            a = (hT @ Ec).transpose(2, 0, 1) * (1.0 / n)  # (K, B, C)
            b = (hT @ Es).transpose(2, 0, 1) * (1.0 / n)
            Wr, Wi = P[f"blk{i}_sr"], P[f"blk{i}_si"]
            a2 = (a @ Wr + b @ Wi).transpose(1, 2, 0)  # (B, C, K)
            b2 = (b @ Wr - a @ Wi).transpose(1, 2, 0)
            return (a2 @ Ec.T + b2 @ Es.T).transpose(0, 2, 1)
        Phi = _basis_real(n, cfg.periodic, cfg.modes)
        hT = h.transpose(0, 3, 1, 2)  # (B, C, nx, ny)
        c = ((hT @ Phi).transpose(0, 1, 3, 2) @ Phi) * (1.0 / (n * n))  # (B, C, My, Mx)
        c = c * P[f"blk{i}_s"]
        y = ((c @ Phi.T).transpose(0, 1, 3, 2) @ Phi.T)  # (B, C, nx, ny)
        return y.transpose(0, 2, 3, 1)

    # ------------------------------------------------------------------
    def forward(self, U, tau=None, t=None, d=None, coef=None) -> np.ndarray:
        B = np.shape(U)[0]
        tau = np.zeros(B) if tau is None else tau
        t = np.ones(B) if t is None else t
        return value_of(self.apply(self.param_list(), np.asarray(U, float), tau, t, d, coef))

    def forward_jvp_tau(self, U, tau, t, d=None, coef=None):
        return self.predictor(coef).jvp_tau(np.asarray(U, float), tau, t, d)

    def forward_jvp_u(self, direction, U, tau, t, d=None, coef=None):
        return self.predictor(coef).jvp_u(np.asarray(U, float), tau, t, d, np.asarray(direction, float))

    # ------------------------------------------------------------------
    def header(self) -> dict:
        return {"config": dataclasses.asdict(self.cfg), "norm": self.norm.to_dict()}


def _per_sample(v, B: int):
    """Broadcast a scalar or length-``B`` time value to ``(B,)`` (duals pass through)."""
    if isinstance(value_of(v), np.ndarray) and np.ndim(value_of(v)) == 1:
        return v
    return np.full(B, float(value_of(v)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    net: MeanFlowNet
    epoch: int = 0
    step: int = 0
    best_val: float = float("inf")
    seed: int = 0
    opt_state: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def config_hash(self) -> str:
        return tio.config_hash(self.net.header())


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Directory with ``checkpoint.json`` and one STMF1 file per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    net = ckpt.net
    files = {}
    for name in net.names:
        tio.write_tensor(path / f"param_{name}.stmf", net.params[name])
        files[name] = f"param_{name}.stmf"
    opt_files = {}
    for key in ("m", "v"):
        for name, arr in ckpt.opt_state.get(key, {}).items():
            fname = f"adam_{key}_{name}.stmf"
            tio.write_tensor(path / fname, arr)
            opt_files.setdefault(key, {})[name] = fname
    header = {
        **net.header(),
        "config_hash": ckpt.config_hash(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_val_rel_l2": ckpt.best_val,
        "seed": ckpt.seed,
        "params": files,
        "adam": {"t": ckpt.opt_state.get("t", 0), "files": opt_files},
        "extra": ckpt.extra,
    }
    tio.write_json(path / "checkpoint.json", header)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    head_path = path / "checkpoint.json"
    if not head_path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    head = tio.read_json(head_path)
    cfg = ModelConfig(**head["config"])
    norm = Normalizer(**head["norm"])
    params = {name: tio.read_tensor(path / f) for name, f in head["params"].items()}
    opt: dict[str, Any] = {"t": head["adam"]["t"]}
    for key, mapping in head["adam"]["files"].items():
        opt[key] = {name: tio.read_tensor(path / f) for name, f in mapping.items()}
    return Checkpoint(
        MeanFlowNet(cfg, norm, params),
        epoch=head["epoch"],
        step=head["step"],
        best_val=head["best_val_rel_l2"],
        seed=head["seed"],
        opt_state=opt,
        extra=head.get("extra", {}),
    )
