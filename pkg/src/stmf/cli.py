"""Command line: ``stmf gen|train|infer|verify|invert``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import glob
import hashlib
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .io import write_json, write_tensor

EXIT_MISSING = 2


class MissingInput(Exception):
    pass


def build_hash() -> str:
    """Digest of the package sources; ties every artifact to the code that made it."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_manifest(args: argparse.Namespace, **extra) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return {"command": args.command, "args": cfg, "version": __version__, "build": build_hash(), **extra}


@contextlib.contextmanager
def staged_output(out: str | Path):
    """Write into a sibling temp dir and move files into ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for item in sorted(tmp.iterdir()):
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        os.replace(item, dest)
    tmp.rmdir()


def _load_dataset(path):
    from .classical import load_dataset

    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise MissingInput(f"dataset not found: {path} ({e})") from None


def _load_net(path):
    from .model import load_checkpoint

    p = Path(path)
    if not (p / "checkpoint.json").exists():
        if (p / "best" / "checkpoint.json").exists():
            p = p / "best"
        else:
            raise MissingInput(f"checkpoint not found: {path}")
    return load_checkpoint(p).net


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def parse_steps(text: str) -> list[int]:
    """``"4"`` or ``"1..16"`` or ``"1,2,8"``."""
    try:
        if ".." in text:
            a, b = text.split("..")
            out = list(range(int(a), int(b) + 1))
        else:
            out = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad step spec {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("steps must be >= 1")
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> None:
    from .classical import default_config, gen_dataset, save_dataset

    cfg = default_config(args.pde, args.res)
    ds = gen_dataset(cfg, args.n, seed=args.seed)
    with staged_output(args.out) as tmp:
        save_dataset(ds, tmp)
        write_json(tmp / "run.json", run_manifest(args))
    print(f"wrote {ds.n} {args.pde} samples to {args.out}")


def cmd_train(args) -> None:
    from .training import TrainConfig, train

    ds = _load_dataset(args.data)
    over = {k: getattr(args, k) for k in ("lr", "batch_size", "epochs", "lr_schedule", "clip") if getattr(args, k) is not None}
    cfg = TrainConfig.for_pde(ds.pde, args.ablate, seed=args.seed, save_every_epoch=args.save_every_epoch, **over)
    model_over = {}
    if args.width is not None:
        model_over["width"] = args.width
    if args.depth is not None:
        model_over["depth"] = args.depth
    log = (lambda r: print(f"epoch {r['epoch']} loss {r['L_Total']:.4g} val {r['val_relL2']:.4g}", flush=True)) if not args.quiet else None
    with staged_output(args.out) as tmp:
        res = train(cfg, ds, out_dir=tmp, progress=log, **model_over)
        write_json(tmp / "run.json", run_manifest(args, dataset=str(args.data), train_config=cfg.to_dict()))
    print(f"best val rel-L2 {res.best.best_val:.4g} after {len(res.steps)} steps")


def cmd_infer(args) -> None:
    from .inference import eval_dataset, ood_eval, resolution_eval, step_sweep
    from .training import predict_one_step, rel_l2

    net = _load_net(args.ckpt)
    ds = _load_dataset(args.data)
    x, y = ds.split(args.split)
    metrics: dict = {}
    with staged_output(args.out) as tmp:
        if net.cfg.static:
            pred = predict_one_step(net, _static_u0(y), 1.0, coef=x)
            true = y
        else:
            pred = predict_one_step(net, y[:, 0], 1.0)
            true = y[:, -1]
        write_tensor(tmp / "predictions.stmf", pred)
        metrics["rel_l2"] = rel_l2(pred, true)
        if args.steps:
            if net.cfg.static:
                raise SystemExit("--steps needs a time-dependent model")
            sweep = step_sweep(net, y[:, 0], y[:, -1], args.steps)
            _write_csv(tmp / "steps.csv", ["steps", "rel_l2"], sorted(sweep.items()))
            metrics["steps"] = sweep
        if args.res:
            base = ds.params.get("res", x.shape[-1])
            n = args.eval_n or ds.n
            table = resolution_eval(net, ds.pde, n, ds.seed, [base] + [r for r in args.res if r != base], base=base)
            _write_csv(tmp / "resolution.csv", ["res", "rel_l2"], sorted(table.items()))
            metrics["resolution"] = table
        if args.ood:
            table = ood_eval(net, ds.pde, args.ood, args.eval_n or 100, args.seed)
            _write_csv(tmp / "ood.csv", ["setting", "rel_l2"], table.items())
            metrics["ood"] = table
        write_json(tmp / "metrics.json", metrics)
        write_json(tmp / "run.json", run_manifest(args))
    print(f"rel-L2 {metrics['rel_l2']:.4g}")


def _static_u0(y):
    from .training import static_initial_state

    return static_initial_state(y)


def cmd_verify(args) -> None:
    from . import verify as V
    from .meanflow import pde_for

    report: dict = {"suite": args.suite}
    with staged_output(args.out) as tmp:
        if args.suite == "identity":
            res = {c: V.check_advection_identity(c=(c,), samples=args.samples, seed=args.seed) for c in (0.0, 1.0)}
            steps = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
            errs = [V.check_advection_identity(samples=args.samples, seed=args.seed, step=h) for h in steps]
            _write_csv(tmp / "identity_fd.csv", ["fd_step", "max_residual"], zip(steps, errs))
            report["max_residual"] = res
            report["fd_slope"] = V.loglog_slope(steps, errs)
            hal = V.advection_halving(seed=args.seed)
            rep = V.check_decoupling([t for _, t in hal], "advection", hal)
            report["decoupling"] = {"advection": rep.to_dict()}
        elif args.suite == "bounds":
            paths = sorted(glob.glob(args.ckpt_glob)) if args.ckpt_glob else []
            if not paths:
                raise MissingInput(f"no checkpoints match {args.ckpt_glob!r}")
            nets = [_load_net(p) for p in paths]
            ds = _load_dataset(args.data)
            pde = pde_for(ds.pde, ds.params)
            x, y = ds.split("test")
            net = nets[-1]
            k = min(args.samples, len(y))
            if pde.static:
                hal = V.model_halving(net, pde, y[:k], 0.0, 0.0, (4, 2, 1), coef=x[:k])
            else:
                L = y.shape[1]
                hal = V.model_halving(net, pde, y[:k, L // 4], 0.25, 0.75, (8, 4, 2, 1))
            rep = V.check_decoupling([t for _, t in hal], ds.pde, hal)
            report["decoupling"] = rep.to_dict()
            _write_csv(tmp / "gap_vs_ls.csv", ["l_s", "eps"], zip(rep.extra["halving"]["l_s"], rep.extra["halving"]["eps"]))
            if not pde.static and len(nets) >= 3:
                pairs = V.eval_pairs(y.shape[1], 16, args.seed)
                L_est = V.lipschitz_estimate(pde, y[:2, 0], n_dirs=4, seed=args.seed)
                ap = V.checkpoint_study(nets, pde, y[:k], pairs, L_est)
                report["aposteriori"] = ap.to_dict()
                _write_csv(tmp / "checkpoints.csv", ["checkpoint", "sqrt_loss", "error"],
                           zip(paths, ap.extra["sqrt_loss"], ap.extra["error"]))
            lengths, errs = V.oracle_midpoint_errors(seed=args.seed)
            report["oracle"] = {"l": lengths, "error": errs, "slope": V.loglog_slope(lengths, errs)}
        else:
            J_T, J_S = V.synthetic_jacobians(seed=args.seed)
            report["synthetic"] = V.hessian_condition(J_T, J_S, 1e-2, 1e2)
            if args.ckpt_glob:
                paths = sorted(glob.glob(args.ckpt_glob))
                if not paths:
                    raise MissingInput(f"no checkpoints match {args.ckpt_glob!r}")
                ds = _load_dataset(args.data)
                net = _load_net(paths[-1])
                report["model"] = V.model_hessian_study(net, pde_for(ds.pde, ds.params), ds.split("test")[1], args.samples, args.seed)
        write_json(tmp / "bound_report.json", report)
        write_json(tmp / "run.json", run_manifest(args))
    print(f"wrote {Path(args.out) / 'bound_report.json'}")


def cmd_invert(args) -> None:
    from .inference import inverse_eval

    net = _load_net(args.ckpt)
    ds = _load_dataset(args.data)
    a, u = ds.split("test")
    a, u = a[: args.n], u[: args.n]
    out = inverse_eval(net, a, u, args.init, steps=args.steps, lr=args.lr, lr_min=args.lr_min, clip=args.clip)
    res = out.pop("result")
    with staged_output(args.out) as tmp:
        write_tensor(tmp / "coefficient.stmf", res.a)
        _write_csv(tmp / "trace.csv", ["step", "loss"], enumerate(res.trace))
        write_json(tmp / "metrics.json", out)
        write_json(tmp / "run.json", run_manifest(args))
    print(f"coefficient rel-L2 {out['rel_l2']:.4g} (init {out['rel_l2_init']:.4g})")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .classical import PDE_KINDS
    from .training import ABLATIONS

    p = argparse.ArgumentParser(prog="stmf", description="Spatio-temporal mean-flow PDE solver")
    p.add_argument("--version", action="version", version=f"stmf {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset with a classical solver")
    g.add_argument("--pde", required=True, choices=PDE_KINDS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--res", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a mean-flow model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", default="full", choices=sorted(ABLATIONS))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-schedule", choices=["cosine"])
    t.add_argument("--clip", type=float)
    t.add_argument("--width", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--save-every-epoch", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="evaluate a trained model")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="test", choices=["train", "val", "test"])
    i.add_argument("--steps", type=parse_steps, help="N, a,b,c or lo..hi")
    i.add_argument("--res", type=_int_list, help="comma-separated evaluation resolutions")
    i.add_argument("--ood", type=lambda s: s.split(","), help="comma-separated shifted settings")
    i.add_argument("--eval-n", type=int, help="samples generated for --res/--ood evaluations")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("verify", help="numerical checks of the error bounds")
    v.add_argument("--suite", required=True, choices=["identity", "bounds", "hessian"])
    v.add_argument("--ckpt-glob")
    v.add_argument("--data")
    v.add_argument("--out", required=True)
    v.add_argument("--samples", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    inv = sub.add_parser("invert", help="recover a Darcy coefficient from a solution")
    inv.add_argument("--ckpt", required=True)
    inv.add_argument("--data", required=True)
    inv.add_argument("--out", required=True)
    inv.add_argument("--init", default="harmonic", choices=["harmonic", "zero"])
    inv.add_argument("--n", type=int, default=10)
    inv.add_argument("--steps", type=int, default=2000)
    inv.add_argument("--lr", type=float, default=5e-3)
    inv.add_argument("--lr-min", type=float, default=1e-4)
    inv.add_argument("--clip", type=float, default=1.0)
    inv.add_argument("--seed", type=int, default=0)
    inv.set_defaults(func=cmd_invert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify" and args.suite == "bounds" and (not args.ckpt_glob or not args.data):
        parser.error("--suite bounds needs --ckpt-glob and --data")
    try:
        args.func(args)
    except MissingInput as e:
        print(f"stmf: error: {e}", file=sys.stderr)
        return EXIT_MISSING
    return 0


if __name__ == "__main__":
    sys.exit(main())
