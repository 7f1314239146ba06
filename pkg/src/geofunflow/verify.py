"""Property suites behind `geofunflow verify`."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from . import noad
from .flow import gronwall_check
from .geometry import NWProjector, fibonacci_sphere, nearest_surface, nw_project
from .latent_grid import grid_coords, unit_grid_geometry
from .physics import tangent_project
from .schedule import HomotopyCfg, c1_check, lambda_homotopy

SUITES = ("stencil", "spectrum", "gronwall", "schedule", "projection")


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    value: float
    limit: float
    passed: bool


def _write(out_dir, name, header, rows):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def check_stencil(out_dir=None) -> list:
    t0 = time.perf_counter()
    rows = noad.convergence_sweep((33, 65, 129))
    elapsed = time.perf_counter() - t0
    _write(out_dir, "stencil.csv", ["h", "max_error_interior", "max_error_boundary", "observed_order", "observed_order_boundary"], rows)
    out = []
    for i in range(1, len(rows)):
        for col, layer in ((3, "interior"), (4, "boundary")):
            o = float(rows[i, col])
            out.append(Check("stencil", f"order_{layer}_{i}", o, 3.8, 3.8 <= o <= 4.2))
    out.append(Check("stencil", "runtime_s", elapsed, 1.0, elapsed < 1.0))
    return out


def check_spectrum(out_dir=None) -> list:
    out, rows = [], []
    for h in (1.0, 0.1, 0.01):
        bc = noad.symbol_bound_check(h, samples=20001)
        rows.append([h, bc.max_symbol, bc.max_times_h])
        out.append(Check("spectrum", f"max_symbol_h_{h}", bc.max_times_h, 1.5, bc.max_times_h < 1.5))
    _write(out_dir, "spectrum.csv", ["h", "max_symbol", "max_symbol_times_h"], rows)
    # past wh = 2 the exact derivative grows faster than the stencil's symbol
    wh = np.linspace(2.0, np.pi, 2001)[1:]
    table = noad.ntk_growth_compare(wh, 1, 1.0)
    _write(out_dir, "ntk_growth.csv", ["omega_h", "ad", "discrete"], table)
    gap = float((table[:, 1] - table[:, 2]).min())
    out.append(Check("spectrum", "ad_exceeds_discrete_k1", gap, 0.0, gap > 0.0))
    return out


def check_gronwall(out_dir=None) -> list:
    out, rows = [], []
    for L in (0.0, 0.5, 1.0, 2.0):
        for eps in (1e-3, 1e-2):
            r = gronwall_check(L, eps)
            rows.append([L, eps, r.measured, r.bound])
            out.append(Check("gronwall", f"L{L}_eps{eps}", r.measured, r.bound * 1.001, r.passed))
    _write(out_dir, "gronwall.csv", ["L", "eps_v", "measured", "bound"], rows)
    return out


def check_schedule(out_dir=None, cfg: HomotopyCfg = HomotopyCfg()) -> list:
    mid = 0.5 * (cfg.tau1 + cfg.tau2)
    v1, v2, vm = (lambda_homotopy(t, cfg) for t in (cfg.tau1, cfg.tau2, mid))
    rep = c1_check(cfg, 1e-4)
    tol = 1e-3 * cfg.lambda_max / (cfg.tau2 - cfg.tau1)
    out = [
        Check("schedule", "lambda_tau1", v1, 0.0, v1 == 0.0),
        Check("schedule", "lambda_tau2", v2, cfg.lambda_max, v2 == cfg.lambda_max),
        Check("schedule", "lambda_mid", vm, 0.5 * cfg.lambda_max, vm == 0.5 * cfg.lambda_max),
        Check("schedule", "c1_tau1", rep.mismatch_tau1, tol, rep.mismatch_tau1 <= tol),
        Check("schedule", "c1_tau2", rep.mismatch_tau2, tol, rep.mismatch_tau2 <= tol),
    ]
    _write(out_dir, "schedule.csv", ["name", "value", "limit"], [[c.name, c.value, c.limit] for c in out])
    return out


def check_projection(out_dir=None, fields: int = 100, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    dims = (17, 17, 17)
    spacing, origin = unit_grid_geometry(dims)
    X = grid_coords(dims, origin, spacing).reshape(-1, 3) * 2.0
    surf = fibonacci_sphere(400)
    sdf, idx = nearest_surface(X, surf)
    wall = np.abs(sdf) <= 0.3
    n = surf.normals[idx]
    worst = 0.0
    for _ in range(fields):
        V = rng.normal(size=X.shape) * rng.uniform(0.1, 10.0)
        Vp = tangent_project(V, n, wall)
        worst = max(worst, float(np.abs((Vp * n).sum(-1))[wall].max()))
    out = [Check("projection", "wall_normal_velocity", worst, 1e-12, worst <= 1e-12)]

    # replicated samples leave the projected grid bit-identical
    sp6, org6 = unit_grid_geometry((6, 6, 6))
    proj = NWProjector.init(rng, (6, 6, 6), org6, sp6, 4, hidden=8)
    pts = rng.uniform(-1, 1, (300, 3))
    feats = rng.normal(size=(300, 4))
    base = nw_project(proj, pts, feats).values
    for rep in (2, 3):
        perm = rng.permutation(300 * rep)
        P = np.tile(pts, (rep, 1))[perm]
        F = np.tile(feats, (rep, 1))[perm]
        d = float(np.abs(nw_project(proj, P, F).values - base).max())
        out.append(Check("projection", f"nw_duplicate_{rep}x", d, 0.0, d == 0.0))
    _write(out_dir, "projection.csv", ["name", "value", "limit"], [[c.name, c.value, c.limit] for c in out])
    return out


_RUNNERS = {
    "stencil": check_stencil,
    "spectrum": check_spectrum,
    "gronwall": check_gronwall,
    "schedule": check_schedule,
    "projection": check_projection,
}


def run_suite(name: str, out_dir=None) -> list:
    if name == "all":
        return [c for s in SUITES for c in _RUNNERS[s](out_dir)]
    if name not in _RUNNERS:
        raise ValueError(f"unknown suite {name!r}")
    return _RUNNERS[name](out_dir)


def write_report(path, checks) -> None:
    _write(os.path.dirname(path) or ".", os.path.basename(path), ["suite", "check", "value", "limit", "passed"],
           [[c.suite, c.name, c.value, c.limit, "PASS" if c.passed else "FAIL"] for c in checks])
