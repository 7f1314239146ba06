"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import pipeline as pl
from .cases import gen_case, metric_report, rrmse_field
from .errors import NumericalError
from .geometry import write_point_cloud
from .latent_grid import LatentGrid, grid_coords, read_gfield, write_gfield
from .noad import symbol_central4
from .physics import residual_report, write_residual_report
from .schedule import schedule_table
from .verify import SUITES, run_suite, write_report

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _load_cfg(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _progress(quiet):
    if quiet:
        return None

    def log(row):
        if row["epoch"] % 25 == 0:
            print(f"epoch {row['epoch']:4d}  {row['phase']:<20s} L_FM={row['L_FM']:.6g} "
                  f"L_TV={row['L_TV']:.6g} L_phys={row['L_phys']:.6g}", file=sys.stderr)
    return log


# ---- commands ------------------------------------------------------------

def cmd_encode(args):
    cfg = _load_cfg(args)
    if args.checkpoint:
        state = pl.load_checkpoint(args.checkpoint)
        problem, models = state.problem, state.models
    else:
        problem = pl.build_problem(cfg)
        models = pl.init_models(cfg, problem)
        pl.fae_warmup(cfg, problem, models)
    os.makedirs(args.out, exist_ok=True)
    write_point_cloud(os.path.join(args.out, "surface.csv"), problem.surface)
    n = min(args.samples, len(problem.values))
    X = grid_coords(problem.cfg.fine_dims, problem.fine_origin, problem.fine_spacing) * problem.amap.scale
    for i in range(n):
        lat = models.fae.encode(problem.geom, problem.values[i])
        write_gfield(os.path.join(args.out, f"latent_{i:03d}.gfield"),
                     LatentGrid(lat, problem.spacing, problem.origin), problem.amap)
        ref = pl._targets(gen_case(problem.variants[i], X), problem.cfg.domain)
        write_gfield(os.path.join(args.out, f"case_{i:03d}.gfield"), pl.fine_grid(problem, ref), problem.amap)
    print(f"encoded {n} samples into {args.out}")


def cmd_warmup(args):
    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg = cfg.replace(warmup_steps=args.steps)
    problem = pl.build_problem(cfg)
    models = pl.init_models(cfg, problem)
    hist = pl.fae_warmup(cfg, problem, models)
    os.makedirs(args.out, exist_ok=True)
    pl.write_fae_csv(os.path.join(args.out, "fae_loss.csv"), hist)
    if hist:
        print(f"warm-up loss {hist[0]:.6g} -> {hist[-1]:.6g} over {len(hist)} steps")


def cmd_train(args):
    if args.resume:
        state = pl.load_checkpoint(args.resume)
        cfg = state.cfg
    else:
        cfg = _load_cfg(args)
        if args.steps is not None:
            cfg = cfg.replace(epochs=args.steps)
        state = None
    state = pl.train(cfg, args.out, state=state, stop_epoch=args.stop_epoch, log=_progress(args.quiet))
    last = state.history[-1]
    print(f"trained to epoch {state.epoch}: L_FM={last['L_FM']:.6g} L_TV={last['L_TV']:.6g} "
          f"L_phys={last['L_phys']:.6g}")


def cmd_sample(args):
    state = pl.load_checkpoint(args.checkpoint)
    steps = args.steps or state.cfg.ode_steps
    seed = state.cfg.seed if args.seed is None else args.seed
    paths = pl.sample_cmd(state, args.out, steps, seed, n=args.n, scheme=state.cfg.scheme)
    print(f"wrote {len(paths)} field(s) to {args.out}")


def cmd_uq(args):
    state = pl.load_checkpoint(args.checkpoint)
    steps = args.steps or state.cfg.ode_steps
    seed = state.cfg.seed if args.seed is None else args.seed
    n = args.n or state.cfg.uq_n
    _, var = pl.uq(state, args.out, n, seed, steps)
    print(f"uq over {n} draws: mean variance {var.mean():.6g}")


def cmd_residual(args):
    cfg = _load_cfg(args)
    problem = pl.build_problem(cfg)
    res, mask = pl.analytic_residuals(cfg, problem)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "residuals.csv")
    write_residual_report(path, residual_report(res, mask))
    for name, r in res.items():
        write_gfield(os.path.join(args.out, f"residual_{name}.gfield"),
                     pl.fine_grid(problem, np.asarray(r, dtype=float)[..., None]), problem.amap)
    print(f"wrote {path}")


def cmd_trajectory(args):
    state = pl.load_checkpoint(args.checkpoint)
    steps = args.steps or state.cfg.ode_steps
    seed = state.cfg.seed if args.seed is None else args.seed
    rows = pl.residual_trajectory(state, args.rows, seed, steps)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "trajectory.csv")
    _write_rows(path, ["t", "residual"], rows)
    print(f"wrote {path}")


def cmd_metrics(args):
    pred, _ = read_gfield(args.pred)
    ref, _ = read_gfield(args.ref)
    if pred.values.shape != ref.values.shape:
        raise UsageError("prediction and reference grids differ in shape")
    rep = metric_report(pred.values.reshape(-1, pred.channels), ref.values.reshape(-1, ref.channels))
    rows = [["mae", rep.mae], ["rel_l2", rep.rel_l2], ["rrmse_field", rep.rrmse_field]]
    for c in range(ref.channels):
        rows.append([f"rrmse_field_c{c}", rrmse_field([pred.values[..., c].ravel()], [ref.values[..., c].ravel()])])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metrics.csv")
    _write_rows(path, ["metric", "value"], rows)
    print(f"wrote {path}")


def cmd_schedule(args):
    cfg = _load_cfg(args)
    epochs = args.steps or cfg.epochs
    rows = schedule_table(epochs, cfg.homotopy(), cfg.relax())
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "schedule.csv")
    _write_rows(path, ["tau", "lambda", "lambda_phys", "composite", "phase"], rows)
    print(f"wrote {path}")


def cmd_spectrum(args):
    n = args.steps or 20001
    wh = np.linspace(0.0, np.pi, n)
    rows = []
    for h in args.h:
        omega = wh / h
        mag = np.abs(symbol_central4(omega, h))
        rows.extend([w, m, w, 1.5 / h, h] for w, m in zip(omega, mag))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "spectrum.csv")
    _write_rows(path, ["omega", "symbol_magnitude", "ad_magnitude", "bound", "h"], rows)
    print(f"wrote {path}")


def cmd_verify(args):
    checks = run_suite(args.suite, args.out)
    if args.out:
        write_report(os.path.join(args.out, "verify.csv"), checks)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.suite}.{c.name} value={c.value!r} limit={c.limit!r}")
    if failed:
        print("failed: " + ", ".join(f"{c.suite}.{c.name}" for c in failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=_u64, default=None)
    common.add_argument("--steps", type=_positive, default=None)
    common.add_argument("--out", default=".", help="output directory")

    p = _Parser(prog="geofunflow", description="Latent flow matching for 3D fields on point-cloud geometry.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("encode", parents=[common], help="encode data samples into latent grids")
    s.add_argument("--checkpoint")
    s.add_argument("--samples", type=_positive, default=4)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("warmup", parents=[common], help="autoencoder warm-up only (--steps overrides)")
    s.set_defaults(func=cmd_warmup)

    s = sub.add_parser("train", parents=[common], help="warm-up plus flow training (--steps sets epochs)")
    s.add_argument("--resume", help="continue from a checkpoint")
    s.add_argument("--stop-epoch", type=_positive, default=None)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, func, text in (("sample", cmd_sample, "draw and decode fields"),
                             ("uq", cmd_uq, "sample variance over repeated draws")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--n", type=_positive, default=None if name == "uq" else 1)
        s.set_defaults(func=func)

    s = sub.add_parser("residual", parents=[common], help="residual report of the analytic case")
    s.set_defaults(func=cmd_residual)

    s = sub.add_parser("trajectory", parents=[common], help="residual along the sampling ODE")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rows", type=_positive, default=11)
    s.set_defaults(func=cmd_trajectory)

    s = sub.add_parser("metrics", parents=[common], help="error metrics between two .gfield files")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("schedule", parents=[common], help="tabulate the physics weight schedule")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("spectrum", parents=[common], help="symbol of the central stencil (--steps = scan size)")
    s.add_argument("--h", type=float, nargs="+", default=[1.0, 0.1, 0.01])
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("verify", parents=[common], help="property suites")
    s.add_argument("suite", choices=("all",) + SUITES)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
