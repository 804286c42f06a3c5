"""Executable checks of the error bounds, the decoupling inequality and Hessian conditioning."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .diffcore import Dual, value_of
from .meanflow import PdeSpec, Predictor, SegmentFields, temporal_residual_fields

PASS_RTOL = 1e-9
PASS_ATOL = 1e-12


def holds(lhs, rhs) -> np.ndarray:
    """Bound check with exact-arithmetic slack."""
    return np.asarray(lhs) <= np.asarray(rhs) * (1 + PASS_RTOL) + PASS_ATOL


def gronwall_constant(l: float, L: float) -> float:
    """``sqrt((exp(2 l L) - 1) / (2 l L))``, equal to 1 in the limit ``l L -> 0``."""
    if l < 0 or L < 0:
        raise ValueError("l and L must be non-negative")
    x = 2.0 * l * L
    if x < 1e-12:
        return math.sqrt(1.0 + x / 2.0)
    return math.sqrt(math.expm1(x) / x)


def loglog_slope(xs, ys) -> tuple[float, float]:
    """Least-squares slope of ``log y`` against ``log x`` and its 95% half-width."""
    xs, ys = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    fit = stats.linregress(xs, ys)
    if len(xs) > 2:
        half = float(stats.t.ppf(0.975, len(xs) - 2) * fit.stderr)
    else:
        half = float("nan")
    return float(fit.slope), half


@dataclass
class BoundReport:
    name: str
    lhs: list[float] = field(default_factory=list)
    rhs: list[float] = field(default_factory=list)
    violations: int = 0
    gap: list[float] = field(default_factory=list)
    slopes: dict[str, tuple[float, float]] = field(default_factory=dict)
    constants: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def n_checked(self) -> int:
        return len(self.lhs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# advection: closed-form mean flow
# ---------------------------------------------------------------------------


def _sin_profile(z):
    return np.sin(2 * np.pi * z)


def _sin_profile_dx(z):
    return 2 * np.pi * np.cos(2 * np.pi * z)


def advection_mean_flow(u0: Callable, c, xi, tau, x, t) -> np.ndarray:
    """``(u0(x - c t) - u0(xi - c tau)) / l`` for the transported profile ``u0``.

    Positions have a trailing axis of length ``ndim`` (``u0`` sees the
    component along ``c`` only when ``ndim > 1``, i.e. a plane wave).
    """
    c = np.atleast_1d(np.asarray(c, float))
    xi, x = np.asarray(xi, float), np.asarray(x, float)
    tau, t = np.asarray(tau, float), np.asarray(t, float)
    d = x - xi
    l = np.sqrt((t - tau) ** 2 + (d * d).sum(-1))
    cn = c / np.linalg.norm(c) if np.linalg.norm(c) > 0 else np.eye(len(c))[0]
    proj = lambda p: (p * cn).sum(-1)
    return (u0(proj(x - c * t[..., None])) - u0(proj(xi - c * tau[..., None]))) / l


def advection_identity_residual(u0, c, xi, tau, x, t, step: float = 1e-5) -> np.ndarray:
    """``[l_t + d . c] m - l^2 (dm/dxi . c + dm/dtau)`` with central differences of step ``step``."""
    c = np.atleast_1d(np.asarray(c, float))
    xi, x = np.atleast_2d(np.asarray(xi, float)), np.atleast_2d(np.asarray(x, float))
    if xi.shape[-1] != len(c):
        xi, x = xi.T, x.T
    tau, t = np.asarray(tau, float), np.asarray(t, float)
    m = advection_mean_flow(u0, c, xi, tau, x, t)
    d = x - xi
    l2 = (t - tau) ** 2 + (d * d).sum(-1)
    dm_dtau = (advection_mean_flow(u0, c, xi, tau + step, x, t) - advection_mean_flow(u0, c, xi, tau - step, x, t)) / (2 * step)
    dm_dxi_c = 0.0
    for k in range(len(c)):
        e = np.zeros(len(c))
        e[k] = step
        dk = (advection_mean_flow(u0, c, xi + e, tau, x, t) - advection_mean_flow(u0, c, xi - e, tau, x, t)) / (2 * step)
        dm_dxi_c = dm_dxi_c + dk * c[k]
    return ((t - tau) + (d * c).sum(-1)) * m - l2 * (dm_dxi_c + dm_dtau)


def random_quadruples(n: int, ndim: int, rng: np.random.Generator, min_l: float = 0.05):
    """Anchor/target pairs in the unit box with ``tau < t`` and ``l >= min_l``."""
    out_xi, out_tau, out_x, out_t = [], [], [], []
    while len(out_tau) < n:
        xi, x = rng.uniform(0, 1, ndim), rng.uniform(0, 1, ndim)
        tau, t = np.sort(rng.uniform(0, 1, 2))
        if math.sqrt((t - tau) ** 2 + float(((x - xi) ** 2).sum())) >= min_l:
            out_xi.append(xi)
            out_x.append(x)
            out_tau.append(tau)
            out_t.append(t)
    return np.array(out_xi), np.array(out_tau), np.array(out_x), np.array(out_t)


def check_advection_identity(u0: Callable = _sin_profile, c=(1.0,), samples: int = 100, seed: int = 0,
                             step: float = 1e-5) -> float:
    """Max absolute identity residual of the exact advection mean flow over random segments."""
    c = np.atleast_1d(np.asarray(c, float))
    rng = np.random.default_rng(seed)
    xi, tau, x, t = random_quadruples(samples, len(c), rng)
    return float(np.abs(advection_identity_residual(u0, c, xi, tau, x, t, step)).max())


# ---------------------------------------------------------------------------
# decoupling inequality
# ---------------------------------------------------------------------------


@dataclass
class ResidualTerms:
    """Pieces of the three residuals at matching points; leading axis is the sample.

    ``Kf`` and ``KGu`` are ``K`` applied to the right-hand side and to the
    anchor gradient; ``g`` is the advective coefficient of ``f = g . grad u + h``.
    Scalars ``l_t``, ``l_s``, ``l`` and ``g_op`` are per sample.
    """

    m: np.ndarray
    dm_dtau: np.ndarray
    dm_dxi: np.ndarray
    Kf: np.ndarray
    KGu: np.ndarray
    g: np.ndarray
    d: np.ndarray
    l_t: np.ndarray
    l_s: np.ndarray
    gamma: int
    g_op: np.ndarray
    mask: np.ndarray | None = None

    @property
    def l(self) -> np.ndarray:
        return np.hypot(self.l_t, self.l_s)

    def _s(self, v, extra: int = 0):
        return np.asarray(v, float).reshape((-1,) + (1,) * (self.m.ndim - 1 + extra))

    def r_temp(self) -> np.ndarray:
        return self.m - self.Kf - self.gamma * self._s(self.l_t) * self.dm_dtau

    def r_spac(self) -> np.ndarray:
        dv = self.d.reshape((self.d.shape[0],) + (1,) * (self.m.ndim - 1) + (self.d.shape[-1],))
        return self._s(self.l_s, 1) * self.KGu - self.m[..., None] * dv + self._s(self.l_s**2, 1) * self.dm_dxi

    def r_mf(self) -> np.ndarray:
        return self._s(self.l_t) * self.m - self._s(self.l) * self.Kf - self.gamma * self._s(self.l**2) * self.dm_dtau


def terms_from_segment(seg: SegmentFields) -> ResidualTerms:
    return ResidualTerms(
        m=seg.m, dm_dtau=seg.dm_dtau if seg.pde.gamma else np.zeros_like(seg.m), dm_dxi=seg.dm_dxi,
        Kf=seg.K(seg.f), KGu=seg.K(seg.grad_u), g=seg.g, d=seg.d, l_t=seg.l_t, l_s=seg.l_s,
        gamma=seg.pde.gamma, g_op=seg.g_op, mask=seg.mask,
    )


def advection_terms(u0, du0, c, xi, tau, x, t, step: float = 1e-5) -> ResidualTerms:
    """Exact advection mean flow at scattered segments (one point per sample, ``K = I``)."""
    c = np.atleast_1d(np.asarray(c, float))
    xi, x = np.asarray(xi, float), np.asarray(x, float)
    tau, t = np.asarray(tau, float), np.asarray(t, float)
    mf = lambda a, b: advection_mean_flow(u0, c, a, b, x, t)
    m = mf(xi, tau)
    dm_dtau = (mf(xi, tau + step) - mf(xi, tau - step)) / (2 * step)
    cols = []
    for k in range(len(c)):
        e = np.zeros(len(c))
        e[k] = step
        cols.append((mf(xi + e, tau) - mf(xi - e, tau)) / (2 * step))
    dm_dxi = np.stack(cols, axis=-1)
    cn = c / np.linalg.norm(c)
    grad_u = du0(((xi - c * tau[:, None]) * cn).sum(-1))[:, None] * cn
    g = np.broadcast_to(-c, grad_u.shape).copy()
    f = (g * grad_u).sum(-1)
    return ResidualTerms(m, dm_dtau, dm_dxi, f, grad_u, g, x - xi, t - tau,
                         np.sqrt(((x - xi) ** 2).sum(-1)), 1, np.full(len(m), np.linalg.norm(c)))


def _sample_norm2(r: np.ndarray, mask=None) -> np.ndarray:
    """Per-sample mean of squared entries (over valid points)."""
    r = np.asarray(r, float)
    if r.ndim == 1:
        return r**2
    if mask is not None:
        w = np.broadcast_to(mask.reshape(mask.shape + (1,) * (r.ndim - mask.ndim)), r.shape).astype(float)
        return (r**2 * w).reshape(r.shape[0], -1).sum(1) / np.maximum(w.reshape(r.shape[0], -1).sum(1), 1)
    return (r**2).reshape(r.shape[0], -1).mean(1)


def decoupling_sides(terms: ResidualTerms) -> dict[str, np.ndarray]:
    """Both sides of ``|r_mf|^2 <= c1 |r_temp|^2 + c2 |r_spac|^2 + eps`` per sample.

    ``eps = 3 |r_mf - l_t r_temp - ((l_t - l)/l_s) g . r_spac|^2`` is the
    measured structural gap; with it the inequality follows from
    ``|a + b + c|^2 <= 3(|a|^2 + |b|^2 + |c|^2)`` and ``|g . v| <= |g|_op |v|``.
    """
    rt, rs, rmf = terms.r_temp(), terms.r_spac(), terms.r_mf()
    l = terms.l
    coef = (terms.l_t - l) / terms.l_s
    rest = rmf - terms._s(terms.l_t) * rt - terms._s(coef) * (terms.g * rs).sum(-1)
    mask = terms.mask
    T2, S2, M2 = _sample_norm2(rt, mask), _sample_norm2(rs, mask), _sample_norm2(rmf, mask)
    eps = 3.0 * _sample_norm2(rest, mask)
    c1 = 3.0 * terms.l_t**2
    c2 = 3.0 * (coef * terms.g_op) ** 2
    return {"lhs": M2, "rhs": c1 * T2 + c2 * S2 + eps, "eps": eps, "c1": c1, "c2": c2, "temp": T2, "spac": S2}


def check_decoupling(term_batches: Sequence[ResidualTerms], name: str = "decoupling",
                     halving: Sequence[tuple[float, ResidualTerms]] | None = None) -> BoundReport:
    """Inequality on every batch plus the log-log slope of the gap against ``l_s``."""
    rep = BoundReport(name)
    for terms in term_batches:
        sides = decoupling_sides(terms)
        lhs, rhs = float(sides["lhs"].mean()), float(sides["rhs"].mean())
        rep.lhs.append(lhs)
        rep.rhs.append(rhs)
        rep.gap.append(float(sides["eps"].mean()))
        rep.violations += int(not holds(lhs, rhs))
        rep.constants.setdefault("c1", float(np.mean(sides["c1"])))
        rep.constants.setdefault("c2", float(np.mean(sides["c2"])))
        rep.constants.setdefault("g_op", float(np.mean(terms.g_op)))
    if halving:
        ls = [h for h, _ in halving]
        eps = [float(decoupling_sides(t)["eps"].mean()) for _, t in halving]
        rep.slopes["gap_vs_ls"] = loglog_slope(ls, eps)
        rep.extra["halving"] = {"l_s": ls, "eps": eps}
    return rep


def model_decoupling_terms(pred: Predictor, pde: PdeSpec, u_anchor, tau, t, shift, coef=None) -> ResidualTerms:
    return terms_from_segment(SegmentFields(pred, pde, u_anchor, tau, t, shift, coef))


# ---------------------------------------------------------------------------
# a-posteriori relation
# ---------------------------------------------------------------------------


def oracle_midpoint_errors(u0=_sin_profile, c=1.0, lengths=(0.2, 0.1, 0.05, 0.025), n_points: int = 64, seed: int = 0):
    """Error of ``u(xi, tau) + (l/2) m`` against the exact state at the segment midpoint.

    ``m`` is the exact mean flow of the transported profile, so the residual
    loss is zero; what remains is the curvature term of order ``l^2``.
    """
    rng = np.random.default_rng(seed)
    xi = rng.uniform(0, 1, n_points)
    tau = rng.uniform(0, 0.5, n_points)
    theta = rng.uniform(0.2, 1.3, n_points)  # path direction in the (x, t) plane
    errs = []
    for l in lengths:
        x = xi + l * np.cos(theta)
        t = tau + l * np.sin(theta)
        m = advection_mean_flow(u0, [c], xi[:, None], tau, x[:, None], t)
        mid = u0(xi + 0.5 * l * np.cos(theta) - c * (tau + 0.5 * l * np.sin(theta)))
        approx = u0(xi - c * tau) + 0.5 * l * m
        errs.append(float(np.abs(approx - mid).max()))
    return list(lengths), errs


def spearman(xs, ys) -> float:
    return float(stats.spearmanr(xs, ys).statistic)


def lipschitz_estimate(pde: PdeSpec, fields: np.ndarray, n_dirs: int = 8, step: float = 1e-6, seed: int = 0, coef=None) -> float:
    """Largest observed ``|f(u + e v) - f(u - e v)| / (2 e |v|)`` over random smooth directions."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for u in fields:
        u = u[None]
        for _ in range(n_dirs):
            v = rng.standard_normal(u.shape)
            v = np.real(np.fft.ifftn(np.fft.fftn(v, axes=tuple(range(1, u.ndim))) * _lowpass(u.shape[1:]), axes=tuple(range(1, u.ndim))))
            num = pde.rhs(u + step * v, coef) - pde.rhs(u - step * v, coef)
            best = max(best, float(np.linalg.norm(num) / (2 * step * np.linalg.norm(v))))
    return best


def _lowpass(shape) -> np.ndarray:
    ks = np.meshgrid(*[np.fft.fftfreq(n, 1.0 / n) for n in shape], indexing="ij")
    k2 = sum(k**2 for k in ks)
    return (k2 <= 8**2).astype(float)


def check_aposteriori(
    checkpoint_losses: Sequence[float],
    checkpoint_errors: Sequence[float],
    point_errors: np.ndarray | None = None,
    point_eps: np.ndarray | None = None,
    point_l: np.ndarray | None = None,
    C: float = 1.0,
    calib_fraction: float = 0.5,
    seed: int = 0,
) -> BoundReport:
    """Rank correlation of checkpoint-level ``sqrt(loss)`` against error, plus a per-point bound.

    The per-point check fits ``c`` in ``err <= C sqrt(eps) + c l^2`` on a
    calibration subset and reports the fraction of held-out points satisfying it.
    """
    if len(checkpoint_losses) < 3:
        raise ValueError("need at least three checkpoints")
    rep = BoundReport("aposteriori")
    rep.extra["sqrt_loss"] = [float(v) for v in checkpoint_losses]
    rep.extra["error"] = [float(v) for v in checkpoint_errors]
    rep.constants["spearman"] = spearman(checkpoint_losses, checkpoint_errors)
    rep.constants["C"] = C
    if point_errors is not None:
        e, eps, l = (np.asarray(a, float).ravel() for a in (point_errors, point_eps, point_l))
        rng = np.random.default_rng(seed)
        idx = rng.permutation(e.size)
        cal, hold = idx[: int(calib_fraction * e.size)], idx[int(calib_fraction * e.size):]
        c_fit = float(max(0.0, np.max((e[cal] - C * np.sqrt(eps[cal])) / l[cal] ** 2)))
        ok = holds(e[hold], C * np.sqrt(eps[hold]) + c_fit * l[hold] ** 2)
        rep.constants["c_fit"] = c_fit
        rep.constants["holdout_fraction"] = float(ok.mean())
        rep.violations = int((~ok).sum())
        rep.lhs = e[hold].tolist()[:1000]
        rep.rhs = (C * np.sqrt(eps[hold]) + c_fit * l[hold] ** 2).tolist()[:1000]
    return rep


# ---------------------------------------------------------------------------
# Hessian conditioning
# ---------------------------------------------------------------------------


def condition_number(H: np.ndarray) -> float:
    H = 0.5 * (H + H.T)
    ev = np.linalg.eigvalsh(H)
    lo, hi = ev[0], ev[-1]
    if lo <= hi * 1e-15:
        return float("inf")
    return float(hi / lo)


def gauss_newton_hessians(J_T: np.ndarray, J_S: np.ndarray, alpha: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """``H_dec = a^2 J_T'J_T + b^2 J_S'J_S`` and ``H_coup = H_dec + a b (J_T'J_S + J_S'J_T)``."""
    H_dec = alpha**2 * J_T.T @ J_T + beta**2 * J_S.T @ J_S
    H_coup = H_dec + alpha * beta * (J_T.T @ J_S + J_S.T @ J_T)
    return H_dec, H_coup


def identifiable_basis(J_T: np.ndarray, J_S: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis of parameter directions that move either residual.

    Directions in the common null space (e.g. weights of input channels that
    are constant over a batch) leave both Hessians singular and carry no
    information about the coupling, so conditioning is measured on the rest.
    """
    _, s, Vt = np.linalg.svd(np.vstack([J_T, J_S]), full_matrices=False)
    return Vt[s > rtol * s[0]].T


def _factor_condition(A: np.ndarray) -> float:
    """Condition number of ``A'A`` from the singular values of ``A``."""
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 0:
        return float("inf")
    return float((s[0] / s[-1]) ** 2)


def hessian_condition(J_T: np.ndarray, J_S: np.ndarray, alpha: float, beta: float, cross: bool = True,
                      restrict: bool = True) -> dict[str, float]:
    """Condition numbers of the decoupled and coupled Gauss-Newton Hessians.

    Both Hessians are Gram matrices, ``H_dec = A'A`` with ``A = [a J_T; b J_S]``
    and ``H_coup = B'B`` with ``B = a J_T + b J_S``, so their condition numbers
    are squared singular-value ratios, which stay accurate far beyond the
    reach of an eigensolver on ``H``. With ``restrict`` both are taken on
    :func:`identifiable_basis`. ``cross=False`` drops the cross term, making
    the two identical.
    """
    if restrict:
        P = identifiable_basis(alpha * J_T, beta * J_S)
        J_T, J_S = J_T @ P, J_S @ P
    A = np.vstack([alpha * J_T, beta * J_S])
    dec = _factor_condition(A)
    coup = _factor_condition(alpha * J_T + beta * J_S) if cross else dec
    return {"decoupled": dec, "coupled": coup, "dim": int(J_T.shape[1])}


def synthetic_jacobians(p: int = 6, n: int = 40, alpha: float = 1e-2, beta: float = 1e2, seed: int = 0):
    """Jacobians with shared singular vectors whose scaled contributions nearly cancel.

    ``alpha J_T + beta J_S`` keeps only the small mismatches ``delta``, so the
    coupled Hessian is badly conditioned while the decoupled one is not.
    """
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, p)))
    V, _ = np.linalg.qr(rng.standard_normal((p, p)))
    delta = np.logspace(0, -3, p)
    s_T = np.ones(p)
    s_S = -(alpha / beta) * (1.0 + delta)
    return U @ np.diag(s_T) @ V.T, U @ np.diag(s_S) @ V.T


def param_jacobian(fn: Callable, params: list[np.ndarray]) -> np.ndarray:
    """Dense Jacobian of ``fn(params) -> array`` by one forward-mode pass per parameter entry."""
    cols = []
    for i, p in enumerate(params):
        for j in range(p.size):
            tangent = np.zeros(p.size)
            tangent[j] = 1.0
            duals = [Dual(q, tangent.reshape(p.shape) if k == i else None) for k, q in enumerate(params)]
            out = fn(duals)
            cols.append(np.ravel(out.tangent_or_zeros() if isinstance(out, Dual) else np.zeros_like(value_of(out))))
    return np.stack(cols, axis=1)


def residual_jacobians(net, pde: PdeSpec, u_anchor: np.ndarray, tau, t, shift) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Jacobians of the temporal and spatial training residuals (targets held fixed).

    Both residuals live on the same anchor points. Returns ``J_T``, ``J_S`` and
    the weights ``alpha = l_t`` and ``beta = ((l - l_t)/l_s) |g|_op``.
    """
    seg = SegmentFields(net.predictor(), pde, u_anchor, tau, t, shift)
    dq = seg.d
    spatial_tau = seg.t  # same-time anchors for the spatial residual
    fn_T = lambda P: net.apply(P, seg.U, seg.tau, seg.t, None)
    fn_S = lambda P: net.apply(P, seg.U, spatial_tau, seg.t, dq) * (-float(seg.d[0, 0]))
    params = net.param_list()
    J_T = param_jacobian(fn_T, params)
    J_S = param_jacobian(fn_S, params)
    l_t, l_s = float(seg.l_t.mean()), float(seg.l_s.mean())
    l = math.hypot(l_t, l_s)
    beta = abs((l - l_t) / l_s) * float(seg.g_op.mean())
    return J_T, J_S, l_t, beta


# ---------------------------------------------------------------------------
# studies over trained models
# ---------------------------------------------------------------------------


def eval_pairs(traj_len: int, count: int, seed: int = 0) -> np.ndarray:
    """Fixed set of ordered index pairs ``i < j`` shared by every checkpoint."""
    rng = np.random.default_rng([seed, 11])
    iu = np.stack(np.triu_indices(traj_len, 1), axis=1)
    return iu[np.sort(rng.choice(len(iu), size=min(count, len(iu)), replace=False))]


def fixed_grid_study(net, pde: PdeSpec, traj: np.ndarray, pairs: np.ndarray, chunk: int = 64) -> dict[str, np.ndarray | float]:
    """MeanFlow residual and reconstruction error on fixed-grid segments.

    On the grid (``l_s = 0``) the MeanFlow residual is ``l_t`` times the
    temporal one. Returns ``sqrt_loss`` (root mean square of that residual),
    ``error`` (mean relative L2 of ``u(tau) + l_t m`` against ``u(t)``) and
    per-point arrays ``point_error``, ``point_eps`` and ``point_l``.
    """
    L = traj.shape[1]
    rows = np.repeat(np.arange(traj.shape[0]), len(pairs))
    ij = np.tile(pairs, (traj.shape[0], 1))
    r2, errs, pe, peps, pl = [], [], [], [], []
    pred = net.predictor()
    for s in range(0, len(rows), chunk):
        b, p = rows[s : s + chunk], ij[s : s + chunk]
        U, true = traj[b, p[:, 0]], traj[b, p[:, 1]]
        tau, t = p[:, 0] / (L - 1), p[:, 1] / (L - 1)
        seg = SegmentFields(pred, pde, U, tau, t)
        r_mf = seg.s(seg.l_t) * temporal_residual_fields(seg)
        approx = U + seg.s(seg.l_t) * seg.m
        axes = tuple(range(1, U.ndim))
        r2.append((r_mf**2).reshape(len(b), -1))
        errs.append(np.sqrt(((approx - true) ** 2).sum(axes) / (true**2).sum(axes)))
        pe.append(np.abs(approx - true).reshape(len(b), -1))
        peps.append((r_mf**2).reshape(len(b), -1))
        pl.append(np.broadcast_to(seg.s(seg.l_t), U.shape).reshape(len(b), -1))
    r2 = np.concatenate(r2)
    return {
        "sqrt_loss": float(np.sqrt(r2.mean())),
        "error": float(np.concatenate(errs).mean()),
        "point_error": np.concatenate(pe),
        "point_eps": np.concatenate(peps),
        "point_l": np.concatenate(pl),
    }


def checkpoint_study(nets: Sequence, pde: PdeSpec, traj: np.ndarray, pairs: np.ndarray, L_est: float | None = None) -> BoundReport:
    """Rank correlation across checkpoints plus the per-point bound on the last one."""
    studies = [fixed_grid_study(n, pde, traj, pairs) for n in nets]
    last = studies[-1]
    l_max = float(last["point_l"].max())
    C = gronwall_constant(l_max, L_est) if L_est is not None else 1.0
    rep = check_aposteriori(
        [s["sqrt_loss"] for s in studies], [s["error"] for s in studies],
        last["point_error"], last["point_eps"], last["point_l"], C=C,
    )
    if L_est is not None:
        rep.constants["L_estimate"] = L_est
    return rep


def model_halving(net, pde: PdeSpec, u_anchor, tau, t, shifts: Sequence[int], coef=None) -> list[tuple[float, ResidualTerms]]:
    """Decoupling terms along the first axis for a sequence of grid shifts."""
    out = []
    for s in shifts:
        shift = (int(s),) + (0,) * (pde.ndim - 1)
        terms = model_decoupling_terms(net.predictor(), pde, u_anchor, tau, t, shift, coef)
        out.append((float(terms.l_s.mean()), terms))
    return out


def advection_halving(lengths=(0.04, 0.02, 0.01, 0.005), n: int = 64, l_t: float = 0.5, c: float = 1.0, seed: int = 0):
    """Exact advection terms for shrinking spatial legs at a fixed temporal leg."""
    rng = np.random.default_rng(seed)
    xi = rng.uniform(0, 1, (n, 1))
    tau = rng.uniform(0, 1, n)
    return [(ls, advection_terms(_sin_profile, _sin_profile_dx, [c], xi, tau, xi + ls, tau + l_t)) for ls in lengths]


def model_hessian_study(net, pde: PdeSpec, traj: np.ndarray, batches: int = 10, seed: int = 0,
                        batch_size: int = 2, max_params: int = 200) -> dict:
    """Compare conditioning of the two Hessians on random batches of a (tiny) trained model."""
    if net.n_params() > max_params:
        raise ValueError(f"model has {net.n_params()} parameters; the dense study allows at most {max_params}")
    if pde.static:
        raise ValueError("the Hessian study uses time-dependent segments")
    rng = np.random.default_rng([seed, 13])
    L = traj.shape[1]
    rows = []
    for _ in range(batches):
        b = rng.choice(len(traj), size=min(batch_size, len(traj)), replace=False)
        i, j = np.sort(rng.choice(L, size=2, replace=False))
        s = int(rng.integers(1, 5))
        J_T, J_S, a, be = residual_jacobians(net, pde, traj[b, i], i / (L - 1), j / (L - 1), (s,))
        k = hessian_condition(J_T, J_S, a, be)
        rows.append({**k, "alpha": a, "beta": be, "shift": s})
    wins = sum(r["decoupled"] < r["coupled"] for r in rows)
    return {"batches": rows, "decoupled_better": int(wins), "n": len(rows)}
