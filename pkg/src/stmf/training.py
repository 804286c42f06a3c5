"""Training loop: data loss plus the decoupled temporal and spatial residual losses."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import io as tio
from .classical import Dataset, harmonic_extension
from .diffcore import NonFiniteError, Tape, Tensor, value_of
from .meanflow import PdeSpec, mean_square, pde_for, spatial_residual, temporal_residual, total_loss
from .model import Checkpoint, MeanFlowNet, ModelConfig, Normalizer, config_for, reference_solution, save_checkpoint

METRIC_COLUMNS = ["epoch", "step", "L_Total", "L_Data", "L_TMF", "L_SMF", "val_relL2", "lr"]

ABLATIONS = {
    "full": {},
    "wo-tmf": {"lam_t": 0.0},
    "wo-smf": {"lam_s": 0.0},
    "wo-both": {"lam_t": 0.0, "lam_s": 0.0},
}

# per-pde optimizer defaults: lr, batch size, epochs
TABLE_DEFAULTS = {
    "burgers": (5.5e-4, 8, 200),
    "ns2d": (2.0e-4, 5, 100),
    "darcy": (3.0e-4, 4, 300),
    "poisson": (3.0e-4, 4, 300),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: Checkpoint | None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    pde: str = "burgers"
    lr: float = 5.5e-4
    batch_size: int = 8
    epochs: int = 200
    lam_t: float = 0.01
    lam_s: float = 0.01
    pairs_per_iter: int = 4
    endpoint_pairs: int = 1
    seed: int = 0
    lr_schedule: str | None = None
    shift_range: tuple[int, int] = (1, 4)
    clip: float | None = None
    save_every_epoch: bool = False
    augment: bool = False  # steady problems: random rotation/reflection of the square per batch

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.pairs_per_iter < 1:
            raise ValueError("pairs_per_iter must be >= 1")
        if not 0 <= self.endpoint_pairs < self.pairs_per_iter:
            raise ValueError("endpoint_pairs must leave at least one random pair")
        if self.lam_t < 0 or self.lam_s < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_schedule not in (None, "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        lo, hi = self.shift_range
        if not 1 <= lo <= hi:
            raise ValueError("shift_range must satisfy 1 <= lo <= hi")
        self.shift_range = (int(lo), int(hi))

    @classmethod
    def for_pde(cls, pde: str, ablation: str = "full", **overrides) -> "TrainConfig":
        lr, bs, ep = TABLE_DEFAULTS[pde]
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
        return cls(**{"pde": pde, "lr": lr, "batch_size": bs, "epochs": ep, **ABLATIONS[ablation], **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def sample_time_pairs(traj_len: int, count: int = 4, rng: np.random.Generator | None = None) -> np.ndarray:
    """``count`` index pairs ``(tau, t)`` with ``tau < t``, uniform over all ordered pairs."""
    if traj_len < 2:
        raise ValueError("trajectory needs at least two states")
    rng = rng or np.random.default_rng()
    iu, ju = np.triu_indices(traj_len, k=1)
    pick = rng.integers(0, iu.size, size=count)
    return np.stack([iu[pick], ju[pick]], axis=1)


def adam_init(params: list[np.ndarray]) -> dict:
    return {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}


def clip_by_global_norm(grads: list[np.ndarray], clip: float | None) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if clip is not None and norm > clip:
        grads = [g * (clip / norm) for g in grads]
    return grads, norm


def adam_step(params, grads, state, lr: float, clip: float | None = None, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update with optional global-norm clipping; returns ``(params, state)``."""
    if any(not np.isfinite(g).all() for g in grads):
        raise NonFiniteError("non-finite gradient")
    grads, _ = clip_by_global_norm(grads, clip)
    b1, b2 = betas
    t = state["t"] + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state["m"], grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state["v"], grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, {"t": t, "m": m, "v": v}


def cosine_lr(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total <= 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * min(step, total - 1) / (total - 1)))


def rel_l2(pred: np.ndarray, true: np.ndarray) -> float:
    """Mean over samples of ``|pred - true| / |true|``."""
    pred, true = np.asarray(pred, float), np.asarray(true, float)
    if pred.shape[0] == 0:
        raise ValueError("empty split")
    p = pred.reshape(pred.shape[0], -1)
    q = true.reshape(true.shape[0], -1)
    return float(np.mean(np.linalg.norm(p - q, axis=1) / np.linalg.norm(q, axis=1)))


def static_initial_state(u: np.ndarray) -> np.ndarray:
    """Harmonic extension of the boundary values of each target field."""
    return harmonic_extension(np.asarray(u, float))


def fit_normalizer(ds: Dataset, seed: int = 0, n_pairs: int = 4096, reference: bool = False) -> Normalizer:
    """Statistics of the training split only.

    With ``reference`` the static output scale is that of the deviation from
    the mean-coefficient solution, which is what the network then predicts.
    """
    x, y = ds.split("train")
    if ds.pde in ("darcy", "poisson"):
        u0 = static_initial_state(y)
        kind = "log" if ds.pde == "darcy" else "linear"
        coef = np.log(x) if kind == "log" else x
        coef_mean = float(coef.mean())
        m = y - u0
        if reference:
            m = m - reference_solution(kind, y.shape[-1], coef_mean)
        return Normalizer(
            u_mean=float(y.mean()),
            u_std=float(y.std()) or 1.0,
            m_scale=float(m.std()) or 1.0,
            coef_mean=coef_mean,
            coef_std=float(coef.std()) or 1.0,
        )
    rng = np.random.default_rng([seed, 7])
    L = y.shape[1]
    idx = rng.integers(0, y.shape[0], size=n_pairs)
    pairs = sample_time_pairs(L, n_pairs, rng)
    dt = (pairs[:, 1] - pairs[:, 0]) / (L - 1)
    mf = (y[idx, pairs[:, 1]] - y[idx, pairs[:, 0]]) / dt.reshape((-1,) + (1,) * (y.ndim - 2))
    return Normalizer(u_mean=float(y.mean()), u_std=float(y.std()) or 1.0, m_scale=float(mf.std()) or 1.0)


def model_for_dataset(ds: Dataset, seed: int = 0, **overrides) -> MeanFlowNet:
    cfg = config_for(ds.pde, seed=seed, **overrides)
    return MeanFlowNet(cfg, fit_normalizer(ds, seed, reference=cfg.reference))


# ---------------------------------------------------------------------------
# prediction helpers shared with inference
# ---------------------------------------------------------------------------


def predict_one_step(net: MeanFlowNet, u0: np.ndarray, t: float, coef=None, tau: float = 0.0) -> np.ndarray:
    u0 = np.asarray(u0, float)
    B = u0.shape[0]
    if net.cfg.static:
        return u0 + net.forward(u0, coef=coef)
    m = net.forward(u0, np.full(B, tau), np.full(B, t), coef=coef)
    return u0 + (t - tau) * m


def validate(net: MeanFlowNet, inputs: np.ndarray, targets: np.ndarray, batch: int = 64) -> float:
    """Relative L2 of the one-step prediction: ``u(0) -> u(T)`` or coefficient ``->`` solution."""
    if len(inputs) == 0:
        raise ValueError("empty split")
    preds, trues = [], []
    for s in range(0, len(inputs), batch):
        x, y = inputs[s : s + batch], targets[s : s + batch]
        if net.cfg.static:
            preds.append(predict_one_step(net, static_initial_state(y), 1.0, coef=x))
            trues.append(y)
        else:
            preds.append(predict_one_step(net, y[:, 0], 1.0))
            trues.append(y[:, -1])
    return rel_l2(np.concatenate(preds), np.concatenate(trues))


# ---------------------------------------------------------------------------
# loss for one batch
# ---------------------------------------------------------------------------


@dataclass
class BatchLoss:
    total: float
    data: float
    tmf: float
    smf: float


def _random_shift(ndim: int, lo: int, hi: int, rng: np.random.Generator) -> tuple[int, ...]:
    while True:
        s = rng.integers(-hi, hi + 1, size=ndim)
        if ndim == 1:
            s = np.array([rng.integers(lo, hi + 1) * rng.choice([-1, 1])])
        if np.abs(s).max() >= lo:
            return tuple(int(v) for v in s)


def square_symmetry(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """One of the eight symmetries of the square acting on the last two axes."""
    a = np.rot90(a, k, axes=(-2, -1))
    return np.ascontiguousarray(a[..., ::-1] if flip else a)


def batch_loss_fn(net: MeanFlowNet, pde: PdeSpec, cfg: TrainConfig, x: np.ndarray, y: np.ndarray, rng: np.random.Generator):
    """Closure ``f(*params) -> (total, parts)`` for one mini-batch; randomness is drawn here, once."""
    nm = net.norm
    if pde.static and cfg.augment:
        # constant source and zero boundary values commute with the square's symmetries
        k, flip = int(rng.integers(4)), bool(rng.integers(2))
        x, y = square_symmetry(x, k, flip), square_symmetry(y, k, flip)
    if pde.static:
        coef = x
        u_true = y
        u0 = static_initial_state(y)
        U, tau, t = u0, np.zeros(len(y)), np.ones(len(y))
        lt = np.ones(len(y))
        smf_field, smf_tau, smf_coef = y, np.zeros(len(y)), coef
    else:
        L = y.shape[1]
        rows, taus, ts = [], [], []
        for b in range(len(y)):
            pairs = sample_time_pairs(L, cfg.pairs_per_iter, rng)
            pairs[: cfg.endpoint_pairs] = (0, L - 1)
            for i, j in pairs:
                rows.append(b)
                taus.append(i)
                ts.append(j)
        rows, taus, ts = np.array(rows), np.array(taus), np.array(ts)
        U, u_true = y[rows, taus], y[rows, ts]
        tau, t = taus / (L - 1), ts / (L - 1)
        lt = t - tau
        coef = None
        last = np.arange(cfg.pairs_per_iter - 1, len(rows), cfg.pairs_per_iter)
        smf_field, smf_tau, smf_coef = U[last], tau[last], None
    shift = _random_shift(pde.ndim, *cfg.shift_range, rng)
    f_anchor = None if pde.static or cfg.lam_t == 0 else pde.rhs(U)
    inv_u2 = 1.0 / nm.u_std**2
    inv_m2 = 1.0 / nm.m_scale**2

    def loss(*params):
        pred = net.predictor(coef, params)
        if pde.gamma and cfg.lam_t > 0:
            r_t, m = temporal_residual(pred, pde, U, tau, t, f=f_anchor)
            l_t = mean_square(r_t) * inv_m2
        else:
            m = pred(U, tau, t)
            l_t = None
        mult = lt.reshape((-1,) + (1,) * pde.ndim)
        if pde.static:
            # scaled by what the network predicts, which may exclude a reference solution
            l_data = mean_square(m + (U - u_true)) * inv_m2
        else:
            l_data = mean_square(m * mult + (U - u_true)) * inv_u2
        l_s = None
        if cfg.lam_s > 0:
            spred = net.predictor(smf_coef, params)
            r_s, mask = spatial_residual(spred, pde, smf_field, smf_tau, shift)
            l_s = mean_square(r_s, mask) * inv_u2
        total = total_loss(l_data, l_t, l_s, cfg.lam_t, cfg.lam_s, pde.gamma)
        return total, (l_data, l_t, l_s)

    return loss


def loss_and_grad(net: MeanFlowNet, loss) -> tuple[BatchLoss, list[np.ndarray]]:
    with Tape() as tape:
        leaves = [Tensor(p, requires_grad=True) for p in net.param_list()]
        total, (ld, lt, ls) = loss(*leaves)
        grads = tape.gradient(total, leaves)
    f = lambda v: 0.0 if v is None else float(value_of(v))
    return BatchLoss(f(total), f(ld), f(lt), f(ls)), grads


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict] = field(default_factory=list)
    steps: list[BatchLoss] = field(default_factory=list)
    epoch_checkpoints: list[Path] = field(default_factory=list)


def _snapshot(net: MeanFlowNet, **kw) -> Checkpoint:
    clone = MeanFlowNet(net.cfg, dataclasses.replace(net.norm), {k: v.copy() for k, v in net.params.items()})
    return Checkpoint(clone, **kw)


def _opt_dict(net: MeanFlowNet, state: dict) -> dict:
    return {
        "t": state["t"],
        "m": dict(zip(net.names, state["m"])),
        "v": dict(zip(net.names, state["v"])),
    }


def train(
    cfg: TrainConfig,
    ds: Dataset,
    out_dir: str | Path | None = None,
    net: MeanFlowNet | None = None,
    progress: Callable[[dict], None] | None = None,
    **model_overrides,
) -> TrainResult:
    """Adam on ``L_data + lam_t L_temp + lam_s L_spac``; keeps the best-validation checkpoint."""
    if ds.pde != cfg.pde:
        raise ValueError(f"dataset is {ds.pde!r} but config is for {cfg.pde!r}")
    x_tr, y_tr = ds.split("train")
    x_va, y_va = ds.split("val")
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    pde = pde_for(ds.pde, ds.params)
    net = net or model_for_dataset(ds, cfg.seed, **model_overrides)
    rng = np.random.default_rng([cfg.seed, 1])
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        tio.write_json(out / "train_config.json", {"train": cfg.to_dict(), "model": net.header()})
    n_batches = math.ceil(len(x_tr) / cfg.batch_size)
    total_steps = n_batches * cfg.epochs
    state = adam_init(net.param_list())
    step = 0
    best_val = float("inf")
    best = _snapshot(net, best_val=best_val, seed=cfg.seed)
    result = TrainResult(best=best, last=best)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_tr))
        acc = np.zeros(4)
        for bi in range(n_batches):
            idx = np.sort(order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size])
            lr = cfg.lr if cfg.lr_schedule is None else cosine_lr(step, total_steps, cfg.lr)
            try:
                loss = batch_loss_fn(net, pde, cfg, x_tr[idx], y_tr[idx], rng)
                parts, grads = loss_and_grad(net, loss)
                if not math.isfinite(parts.total):
                    raise NonFiniteError("non-finite loss")
                params, state = adam_step(net.param_list(), grads, state, lr, cfg.clip)
            except (NonFiniteError, FloatingPointError) as exc:
                if out:
                    save_checkpoint(result.best, out / "best")
                raise TrainingDiverged(f"training diverged at epoch {epoch}, step {step}: {exc}", result.best) from exc
            net.set_param_list(params)
            step += 1
            result.steps.append(parts)
            acc += [parts.total, parts.data, parts.tmf, parts.smf]
        acc /= n_batches
        val = validate(net, x_va, y_va)
        row = dict(zip(METRIC_COLUMNS, [epoch, step, *acc.tolist(), val, lr]))
        rows.append(row)
        result.history.append(row)
        opt = _opt_dict(net, state)
        if val < best_val:
            best_val = val
            result.best = _snapshot(net, epoch=epoch, step=step, best_val=val, seed=cfg.seed, opt_state=opt)
            if out:
                save_checkpoint(result.best, out / "best")
        if out and cfg.save_every_epoch:
            p = save_checkpoint(
                _snapshot(net, epoch=epoch, step=step, best_val=best_val, seed=cfg.seed, opt_state=opt),
                out / f"epoch_{epoch:04d}",
            )
            result.epoch_checkpoints.append(p)
        if out:
            write_metrics(out / "metrics.csv", rows)
        if progress:
            progress(row)
    result.last = _snapshot(net, epoch=cfg.epochs, step=step, best_val=best_val, seed=cfg.seed, opt_state=_opt_dict(net, state))
    if out:
        save_checkpoint(result.last, out / "last")
    return result


def write_metrics(path: Path, rows: list[dict]) -> None:
    tmp = Path(path).with_name(Path(path).name + ".part")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)
