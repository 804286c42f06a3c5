"""Path geometry, PDE right-hand sides and the mean-flow residuals.

A path segment runs in a straight line from an anchor ``(xi, tau)`` to a
target ``(x, t)``. The mean flow ``m`` along it satisfies
``l * m = u(x, t) - u(xi, tau)`` with ``l = sqrt(l_t^2 + l_s^2)``.
Differentiating that identity in ``tau`` and in ``xi`` gives the temporal and
spatial residuals evaluated here.

Fields are batched as ``(B, *grid)``; spatial vector fields carry a trailing
axis of length ``ndim``. The anchor displacement ``d = x - xi`` is one vector
per sample, shape ``(B, ndim)``. On a fixed grid the anchor of grid point
``x_j`` is the grid point ``x_j - s h`` for an integer shift ``s``, so the
anchor field is a shifted copy of the snapshot.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import grids
from .classical import ns_forcing, ns_velocity
from .diffcore import Dual, Tensor, jvp, stop_gradient, value_of

PDE_KINDS = ("burgers", "ns2d", "darcy", "poisson", "advection")


class NeumannDivergence(ArithmeticError):
    """Truncated Neumann series for ``K^-1`` stopped contracting."""


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathSegment:
    xi: np.ndarray
    tau: float
    x: np.ndarray
    t: float

    @property
    def l_t(self) -> float:
        return float(self.t - self.tau)

    @property
    def l_s(self) -> float:
        return float(np.linalg.norm(np.atleast_1d(np.asarray(self.x, float) - np.asarray(self.xi, float))))

    @property
    def l(self) -> float:
        return float(np.hypot(self.l_t, self.l_s))


def path_length(xi, tau: float, x, t: float) -> PathSegment:
    xi, x = np.atleast_1d(np.asarray(xi, float)), np.atleast_1d(np.asarray(x, float))
    if not (np.isfinite(xi).all() and np.isfinite(x).all() and np.isfinite([tau, t]).all()):
        raise ValueError("segment coordinates must be finite")
    return PathSegment(xi, float(tau), x, float(t))


def reconstruct_state(u_anchor, m, mult, static: bool = False):
    """``u_anchor + mult * m``; ``mult`` is ``l_t`` on a fixed grid, ``l`` in general, 1 for static problems.

    ``mult`` may be a scalar or one value per sample.
    """
    if np.shape(value_of(u_anchor)) != np.shape(value_of(m)):
        raise ValueError(f"shape mismatch {np.shape(value_of(u_anchor))} vs {np.shape(value_of(m))}")
    if static:
        return u_anchor + m
    mult = np.asarray(mult, dtype=float)
    if mult.ndim == 1:
        mult = mult.reshape(mult.shape + (1,) * (np.ndim(value_of(m)) - 1))
    return u_anchor + m * mult


def per_sample(s, ndim_field: int) -> np.ndarray:
    """Reshape a ``(B,)`` vector to broadcast against ``(B, *grid)``."""
    s = np.asarray(s, dtype=float)
    return s.reshape(s.shape + (1,) * (ndim_field - 1))


# ---------------------------------------------------------------------------
# PDE right-hand sides
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PdeSpec:
    """Which PDE and its scalar coefficients.

    Per-sample coefficient fields (Darcy permeability ``a``, Poisson source
    ``q``) are passed separately as ``coef``. The right-hand side is split as
    ``f = g . grad u + h`` for the decoupling checks.
    """

    kind: str
    nu: float = 0.0
    c: tuple[float, ...] = ()
    q: float = 1.0
    forcing: bool = True
    bounded: bool | None = None

    def __post_init__(self) -> None:
        if self.kind not in PDE_KINDS:
            raise ValueError(f"unsupported pde {self.kind!r}; choose from {PDE_KINDS}")
        if self.kind == "advection" and not self.c:
            raise ValueError("advection needs a wave speed c")

    @property
    def gamma(self) -> int:
        return 0 if self.kind in ("darcy", "poisson") else 1

    @property
    def static(self) -> bool:
        return self.gamma == 0

    @property
    def ndim(self) -> int:
        if self.kind == "burgers":
            return 1
        if self.kind == "advection":
            return len(self.c)
        return 2

    @property
    def periodic(self) -> bool:
        if self.bounded is not None:
            return not self.bounded
        return self.kind in ("burgers", "ns2d", "advection")

    @property
    def needs_coef(self) -> bool:
        return self.static

    def grad(self, u: np.ndarray) -> np.ndarray:
        return grids.grad(u, self.ndim, self.periodic)

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        return grids.laplacian(u, self.ndim, self.periodic)

    def _check_coef(self, coef):
        if self.needs_coef and coef is None:
            raise ValueError(f"{self.kind} needs a coefficient field")
        return coef

    def advective_coeff(self, u: np.ndarray, coef=None) -> np.ndarray:
        """``g`` in ``f = g . grad u + h``; shape ``u.shape + (ndim,)``."""
        coef = self._check_coef(coef)
        if self.kind == "burgers":
            return -u[..., None]
        if self.kind == "advection":
            return np.broadcast_to(-np.asarray(self.c, float), u.shape + (self.ndim,)).copy()
        if self.kind == "ns2d":
            vx, vy = ns_velocity(u)
            return -np.stack([vx, vy], axis=-1)
        if self.kind == "darcy":
            return self.grad(np.asarray(coef, float))
        return np.zeros(u.shape + (self.ndim,))

    def remainder(self, u: np.ndarray, lap_u: np.ndarray, coef=None) -> np.ndarray:
        """``h`` in ``f = g . grad u + h``, given the Laplacian of ``u``."""
        coef = self._check_coef(coef)
        if self.kind == "burgers":
            return self.nu * lap_u
        if self.kind == "advection":
            return np.zeros_like(u)
        if self.kind == "ns2d":
            out = self.nu * lap_u
            return out + ns_forcing(u.shape[-1]) if self.forcing else out
        if self.kind == "darcy":
            return np.asarray(coef, float) * lap_u + self.q
        return lap_u - np.asarray(coef, float)

    def rhs_from(self, u, grad_u, lap_u, coef=None) -> np.ndarray:
        """Right-hand side assembled from supplied derivative fields."""
        return (self.advective_coeff(u, coef) * grad_u).sum(-1) + self.remainder(u, lap_u, coef)

    def rhs(self, u: np.ndarray, coef=None) -> np.ndarray:
        u = np.asarray(u, float)
        return self.rhs_from(u, self.grad(u), self.laplacian(u), coef)

    def g_opnorm(self, u: np.ndarray, coef=None) -> np.ndarray:
        """Per-sample ``max_x |g(x)|`` (Euclidean over components)."""
        g = self.advective_coeff(np.asarray(u, float), coef)
        return np.sqrt((g**2).sum(-1)).reshape(g.shape[0], -1).max(axis=1)


def pde_rhs(pde: PdeSpec, u: np.ndarray, coef=None) -> np.ndarray:
    return pde.rhs(u, coef)


def pde_for(kind: str, params: dict | None = None) -> PdeSpec:
    params = params or {}
    if kind == "burgers":
        return PdeSpec("burgers", nu=params.get("nu", 0.01))
    if kind == "ns2d":
        return PdeSpec("ns2d", nu=params.get("nu", 1e-3))
    if kind == "darcy":
        return PdeSpec("darcy", q=params.get("q", 1.0))
    if kind == "poisson":
        return PdeSpec("poisson")
    raise ValueError(f"no default PdeSpec for {kind!r}")


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------


@dataclass
class Predictor:
    """A mean-flow network bound to parameters and an optional coefficient field.

    ``fn(params, U, tau, t, d, coef)`` must be written against the diffcore
    primitives so it runs on arrays, reverse-mode tensors and duals. ``d`` is
    ``None`` for fixed-grid queries (``xi = x``).
    """

    fn: Callable
    params: Sequence[Any]
    coef: np.ndarray | None = None

    def __call__(self, U, tau, t, d=None):
        return self.fn(self.params, U, tau, t, d, self.coef)

    def detached(self) -> "Predictor":
        return Predictor(self.fn, [value_of(p) for p in self.params], self.coef)

    def with_coef(self, coef) -> "Predictor":
        return Predictor(self.fn, self.params, coef)

    def jvp_u(self, U, tau, t, d, v) -> tuple[np.ndarray, np.ndarray]:
        """``m`` and ``(dm/du) v``."""
        p = self.detached()
        return jvp(lambda Ud: p(Ud, tau, t, d), [U], [v])

    def jvp_tau(self, U, tau, t, d=None) -> tuple[np.ndarray, np.ndarray]:
        """``m`` and ``dm/dtau`` at fixed anchor state."""
        p = self.detached()
        tau = np.asarray(tau, float)
        return jvp(lambda td: p(U, td, t, d), [tau], [np.ones_like(tau)])


def apply_K(f: np.ndarray, m_jvp_u: Callable[[np.ndarray], np.ndarray], l) -> np.ndarray:
    """``f + l (dm/du) f``; ``l`` is a scalar or one length per sample."""
    l = np.asarray(l, float)
    if l.ndim == 1:
        l = per_sample(l, np.ndim(f))
    return f + l * m_jvp_u(f)


# ---------------------------------------------------------------------------
# segment evaluator (value mode, used for verification)
# ---------------------------------------------------------------------------


def anchor_shift_displacement(shift: Sequence[int], n: int, periodic: bool, batch: int) -> np.ndarray:
    h = grids.spacing(n, periodic)
    return np.tile(np.asarray(shift, float) * h, (batch, 1))


class SegmentFields:
    """All numerical pieces of the residuals at a batch of grid-aligned segments.

    ``u_anchor`` is the snapshot at the anchor time ``tau``; the anchor of
    target point ``x_j`` is ``x_j - shift * h``. Spatial derivatives of the
    anchor state are numerical (spectral or finite-difference) and then
    shifted. Partial derivatives of ``m`` with respect to ``xi`` hold the
    anchor state fixed and use central differences of step ``h`` in the
    displacement input. ``dm/dtau`` and ``(dm/du) v`` are forward-mode.
    """

    def __init__(self, pred: Predictor, pde: PdeSpec, u_anchor, tau, t, shift=None, coef=None):
        self.pred = pred.detached()
        self.pde = pde
        u_anchor = np.asarray(u_anchor, float)
        self.B = u_anchor.shape[0]
        self.grid = u_anchor.shape[1:]
        if len(self.grid) != pde.ndim:
            raise ValueError(f"{pde.kind} expects {pde.ndim}-D fields, got grid {self.grid}")
        n = self.grid[0]
        self.h = grids.spacing(n, pde.periodic)
        self.shift = tuple(int(s) for s in (shift or (0,) * pde.ndim))
        if len(self.shift) != pde.ndim:
            raise ValueError("shift must have one entry per spatial axis")
        if any(abs(s) >= n for s in self.shift):
            raise ValueError(f"shift {self.shift} exceeds grid size {n}")
        self.tau = np.broadcast_to(np.asarray(tau, float), (self.B,)).copy()
        self.t = np.broadcast_to(np.asarray(t, float), (self.B,)).copy()
        self.d = anchor_shift_displacement(self.shift, n, pde.periodic, self.B)
        self.l_t = self.t - self.tau
        self.l_s = np.sqrt((self.d**2).sum(-1))
        self.l = np.hypot(self.l_t, self.l_s)

        sh = lambda a: grids.shift_field(a, self.shift, pde.periodic)
        shv = lambda a: np.moveaxis(sh(np.moveaxis(a, -1, 0)), 0, -1)
        coef_arr = None if coef is None else np.asarray(coef, float)
        self.coef = None if coef_arr is None else sh(coef_arr)
        self.U = sh(u_anchor)
        self.grad_u = shv(pde.grad(u_anchor))
        self.lap_u = sh(pde.laplacian(u_anchor))
        self.g = shv(pde.advective_coeff(u_anchor, coef_arr))
        self.h_part = sh(pde.remainder(u_anchor, pde.laplacian(u_anchor), coef_arr))
        self.f = (self.g * self.grad_u).sum(-1) + self.h_part
        self.g_op = np.sqrt((self.g**2).sum(-1)).reshape(self.B, -1).max(axis=1)
        self.mask = grids.valid_mask(self.U.shape, self.shift, pde.periodic)
        self._pd = self.pred.with_coef(self.coef)
        self._dq = None if not any(self.shift) else self.d

    # broadcasting helpers --------------------------------------------------
    def s(self, v) -> np.ndarray:
        """Per-sample scalars shaped to broadcast against ``(B, *grid)``."""
        return per_sample(v, 1 + len(self.grid))

    def sv(self, v) -> np.ndarray:
        """Per-sample scalars shaped to broadcast against ``(B, *grid, ndim)``."""
        return per_sample(v, 2 + len(self.grid))

    def dvec(self) -> np.ndarray:
        return self.d.reshape((self.B,) + (1,) * len(self.grid) + (self.pde.ndim,))

    # model evaluations ------------------------------------------------------
    def _m_at(self, d) -> np.ndarray:
        return value_of(self._pd(self.U, self.tau, self.t, d))

    @functools.cached_property
    def m(self) -> np.ndarray:
        return self._m_at(self._dq)

    @functools.cached_property
    def dm_dtau(self) -> np.ndarray:
        return self._pd.jvp_tau(self.U, self.tau, self.t, self._dq)[1]

    def jvp_u(self, v: np.ndarray) -> np.ndarray:
        return self._pd.jvp_u(self.U, self.tau, self.t, self._dq, v)[1]

    @functools.cached_property
    def _fd_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for k in range(self.pde.ndim):
            e = np.zeros(self.pde.ndim)
            e[k] = self.h
            out.append((self._m_at(self.d + e), self._m_at(self.d - e)))
        return out

    @functools.cached_property
    def dm_dxi(self) -> np.ndarray:
        # xi = x - d, so d/dxi = -d/dd
        return np.stack([-(p - q) / (2 * self.h) for p, q in self._fd_pairs], axis=-1)

    @functools.cached_property
    def lap_m(self) -> np.ndarray:
        return sum((p - 2 * self.m + q) / self.h**2 for p, q in self._fd_pairs)

    # K and its inverse --------------------------------------------------------
    def K(self, v: np.ndarray) -> np.ndarray:
        """``v + l (dm/du) v``; vector fields are handled component-wise."""
        if v.shape == self.U.shape:
            return v + self.s(self.l) * self.jvp_u(v)
        return np.stack([self.K(v[..., k]) for k in range(v.shape[-1])], axis=-1)

    def K_inv(self, v: np.ndarray, order: int = 2) -> np.ndarray:
        """Truncated Neumann series ``sum_{j<=order} (-l dm/du)^j v``."""
        if v.shape != self.U.shape:
            return np.stack([self.K_inv(v[..., k], order) for k in range(v.shape[-1])], axis=-1)
        term, total = v, v.copy()
        prev = float(np.linalg.norm(v))
        for _ in range(order):
            term = -self.s(self.l) * self.jvp_u(term)
            size = float(np.linalg.norm(term))
            if size > prev and size > 1e-14:
                raise NeumannDivergence(f"Neumann term grew from {prev:.3g} to {size:.3g}; l*|dm/du| >= 1")
            prev = size
            total = total + term
        return total


# ---------------------------------------------------------------------------
# residual formulas
# ---------------------------------------------------------------------------


def temporal_residual_fields(seg: SegmentFields) -> np.ndarray:
    """``m - K f - gamma l_t dm/dtau``."""
    r = seg.m - seg.K(seg.f)
    if seg.pde.gamma:
        r = r - seg.s(seg.l_t) * seg.dm_dtau
    return r


def spatial_residual_fields(seg: SegmentFields) -> np.ndarray:
    """``l_s K grad u - m d + l_s^2 dm/dxi``; zero where the anchor is outside a bounded grid."""
    r = seg.sv(seg.l_s) * seg.K(seg.grad_u) - seg.m[..., None] * seg.dvec() + seg.sv(seg.l_s**2) * seg.dm_dxi
    return r * seg.mask[..., None]


def second_order_constraint(seg: SegmentFields, order: int = 2) -> np.ndarray:
    """Laplacian of the anchor state implied by the mean flow.

    ``l K lap u = -(alpha + 2 K^-1 beta)`` with
    ``alpha = n m - (l_s/l)^2 m + l^2 lap m`` and
    ``beta = -(dm/dxi) . d - (l_s^2 / l) (dm/du) m``.
    """
    if np.any(seg.l == 0):
        raise ValueError("second-order constraint needs l > 0")
    n = seg.pde.ndim
    ratio = seg.s((seg.l_s / seg.l) ** 2)
    alpha = n * seg.m - ratio * seg.m + seg.s(seg.l**2) * seg.lap_m
    beta = -(seg.dm_dxi * seg.dvec()).sum(-1) - seg.s(seg.l_s**2 / seg.l) * seg.jvp_u(seg.m)
    rhs = -(alpha + 2.0 * seg.K_inv(beta, order))
    return seg.K_inv(rhs, order) / seg.s(seg.l)


def first_order_constraint(seg: SegmentFields, order: int = 2) -> np.ndarray:
    """Gradient of the anchor state implied by the mean flow: ``K^-1 (m d / l - l dm/dxi)``."""
    if np.any(seg.l == 0):
        raise ValueError("first-order constraint needs l > 0")
    v = seg.m[..., None] * seg.dvec() / seg.sv(seg.l) - seg.sv(seg.l) * seg.dm_dxi
    return seg.K_inv(v, order)


def st_residual_fields(seg: SegmentFields, substitute: bool = False, order: int = 2) -> np.ndarray:
    """``l_t m - l K f - gamma l^2 dm/dtau``.

    With ``substitute`` the spatial derivatives inside ``f`` come from the
    first- and second-order constraints instead of the grid.
    """
    f = seg.f
    if substitute:
        gu = first_order_constraint(seg, order)
        lu = second_order_constraint(seg, order)
        f = seg.pde.rhs_from(seg.U, gu, lu, seg.coef)
    r = seg.s(seg.l_t) * seg.m - seg.s(seg.l) * seg.K(f)
    if seg.pde.gamma:
        r = r - seg.s(seg.l**2) * seg.dm_dtau
    return r


# ---------------------------------------------------------------------------
# training residuals (targets detached)
# ---------------------------------------------------------------------------


def temporal_residual(pred: Predictor, pde: PdeSpec, u_anchor, tau, t, f=None):
    """Fixed-grid temporal residual for training.

    Returns ``(r, m)`` with ``r = m - stop(K f + gamma l_t dm/dtau)``. The target
    is one forward-mode pass with tangent ``f`` on the anchor state and
    ``gamma`` on ``tau``. ``m`` carries the parameters' derivative kind, so it
    can also feed the data loss.
    """
    u_anchor = np.asarray(u_anchor, float)
    tau = np.asarray(tau, float)
    t = np.asarray(t, float)
    if f is None:
        f = pde.rhs(u_anchor, pred.coef)
    m = pred(u_anchor, tau, t)
    p = pred.detached()
    _, tan = jvp(lambda U, td: p(U, td, t), [u_anchor, tau], [f, pde.gamma * np.ones_like(tau)])
    target = f + per_sample(t - tau, u_anchor.ndim) * tan
    return m - stop_gradient(target), m


def spatial_residual(pred: Predictor, pde: PdeSpec, u_anchor, tau, shift: Sequence[int]):
    """Fixed-grid spatial residual for training (same-time anchors, ``l_t = 0``).

    Returns ``(r, mask)`` with ``r = stop(l_s K grad u + l_s^2 dm/dxi) - m d``;
    ``r`` has a trailing axis per spatial dimension and ``mask`` flags points
    whose anchor lies on the grid.
    """
    if not any(shift):
        raise ValueError("spatial residual needs a nonzero anchor offset")
    seg = SegmentFields(pred, pde, u_anchor, tau, tau, shift, pred.coef)
    target = seg.sv(seg.l_s) * seg.K(seg.grad_u) + seg.sv(seg.l_s**2) * seg.dm_dxi
    m = pred.with_coef(seg.coef)(seg.U, seg.tau, seg.t, seg.d)
    r = stop_gradient(target) - m.reshape(m.shape + (1,)) * seg.dvec()
    return r * seg.mask[..., None], seg.mask


def mean_square(r, mask=None):
    """Mean of ``r^2``; with ``mask`` the mean runs over valid points only."""
    sq = r * r
    if mask is None:
        return sq.mean()
    m = np.asarray(mask, float)
    while m.ndim < np.ndim(value_of(sq)):
        m = m[..., None]
    count = max(float(np.broadcast_to(m, np.shape(value_of(sq))).sum()), 1.0)
    return (sq * m).sum() * (1.0 / count)


def total_loss(data_loss, l_temp, l_spac, lam_t: float = 0.01, lam_s: float = 0.01, gamma: int = 1):
    """``L_data + lam_t L_temp + lam_s L_spac``; the temporal term is dropped when ``gamma = 0``."""
    if lam_t < 0 or lam_s < 0:
        raise ValueError("loss weights must be non-negative")
    total = data_loss
    if gamma and lam_t > 0 and l_temp is not None:
        total = total + lam_t * l_temp
    if lam_s > 0 and l_spac is not None:
        total = total + lam_s * l_spac
    return total
