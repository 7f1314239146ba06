"""Physics losses: masks, wall projection, TV, steady inviscid residuals, EOS and entropy terms.

Derivatives come from the explicit stencils in `noad` and are pulled back to
physical units through the affine map.  The `*_value_grad` helpers return
losses together with hand-derived gradients for training.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import noad
from .latent_grid import AffineMap, LatentGrid, jacobian_det
from .spectral import interp_coarse, interp_coarse_adjoint


@dataclass(frozen=True)
class PhaseMaskCfg:
    alpha_m: float
    beta_m: float = 0.0

    def __post_init__(self):
        if not self.alpha_m > 0:
            raise ValueError("alpha_m must be positive")

    @classmethod
    def for_layer(cls, width: float, beta_m: float = 0.0):
        """Sharpness 10 / boundary-layer width."""
        return cls(10.0 / width, beta_m)


@dataclass(frozen=True)
class ShockMaskCfg:
    gamma: float = 1.0
    eps_p: float = 1e-6

    def __post_init__(self):
        if not (self.gamma > 0 and self.eps_p > 0):
            raise ValueError("gamma and eps_p must be positive")


@dataclass(frozen=True)
class ThermoCfg:
    lambda_iso: float = 1.0
    lambda_2nd: float = 1.0
    r_gas: float = 1.0
    gamma_gas: float = 1.4

    def __post_init__(self):
        if self.lambda_iso < 0 or self.lambda_2nd < 0:
            raise ValueError("thermo weights must be non-negative")
        if not self.gamma_gas > 1:
            raise ValueError("gamma_gas must exceed 1")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def phase_mask(sdf, cfg: PhaseMaskCfg):
    sdf = np.asarray(sdf, dtype=float)
    if not np.all(np.isfinite(sdf)):
        raise ValueError("SDF must be finite")
    return _sigmoid(cfg.alpha_m * sdf + cfg.beta_m)


def smooth_sdf(sdf, radius: int = 2):
    """Single Gaussian pass used to repair small topological defects in an SDF grid."""
    return gaussian_filter(np.asarray(sdf, dtype=float), sigma=radius / 2.0, truncate=2.0, mode="nearest")


def tangent_project(V, n, where=None):
    """Remove the normal component of V; `where` limits the projection to selected nodes."""
    V = np.asarray(V, dtype=float)
    n = np.asarray(n, dtype=float)
    sel = np.ones(V.shape[:-1], dtype=bool) if where is None else np.asarray(where, dtype=bool)
    if np.any(np.abs(np.linalg.norm(n[sel], axis=-1) - 1.0) > 1e-6):
        raise ValueError("normals must be unit length where the projection applies")
    vn = (V * n).sum(-1, keepdims=True)
    return np.where(sel[..., None], V - vn * n, V)


def tv_loss(grid: LatentGrid, amap: AffineMap) -> float:
    return tv_value_grad(grid.values, grid.spacing, amap)[0]


def tv_value_grad(u, spacing, amap: AffineMap):
    """Mean over nodes and channels of sum_i |d_i u| / (R_i + eps), with its gradient."""
    u = np.asarray(u, dtype=float)
    n = u.size
    total = 0.0
    grad = np.zeros_like(u)
    for a in range(3):
        d = noad.diff_axis(u, a, spacing[a])
        total += np.abs(d).sum() / amap.scale[a]
        grad += noad.diff_axis_adjoint(np.sign(d), a, spacing[a]) / amap.scale[a]
    return float(total / n), grad / n


def _field(fields, key):
    if key not in fields:
        raise KeyError(f"missing channel {key!r}")
    return np.asarray(fields[key], dtype=float)


def ns_residual(fields, spacing, amap: AffineMap, rho=None):
    """Continuity and steady inviscid momentum residuals on a grid.

    `fields` maps 'u', 'v', 'w', 'P' (and optionally 'rho') to (H, W, D) arrays.
    """
    V = np.stack([_field(fields, k) for k in ("u", "v", "w")], axis=-1)
    P = _field(fields, "P")
    if rho is None:
        rho = fields.get("rho", 1.0)
    rho = np.asarray(rho, dtype=float)
    GV = noad.physical_gradient(V, spacing, amap)   # (..., comp, axis)
    GP = noad.physical_gradient(P, spacing, amap)
    out = {"continuity": GV[..., 0, 0] + GV[..., 1, 1] + GV[..., 2, 2]}
    for j, name in enumerate(("momentum_x", "momentum_y", "momentum_z")):
        out[name] = (V * GV[..., j, :]).sum(-1) + GP[..., j] / rho
    return out


def assemble_phys_loss(residuals, mask, amap: AffineMap, p: float = 2.0) -> float:
    res = list(residuals.values()) if isinstance(residuals, dict) else list(residuals)
    acc = sum(np.abs(np.asarray(r, dtype=float)) ** p for r in res)
    return float(np.mean(np.asarray(mask) * acc) * jacobian_det(amap))


def eos_loss(P, rho, T, r_gas: float) -> float:
    rho = np.asarray(rho, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(rho <= 0) or np.any(T <= 0):
        raise ValueError("density and temperature must be positive")
    return float(np.mean(np.abs(np.asarray(P, dtype=float) - rho * r_gas * T)))


def shock_mask(P, grad_P, cfg: ShockMaskCfg):
    P = np.asarray(P, dtype=float)
    if np.any(P + cfg.eps_p <= 0):
        raise ValueError("P + eps_p must be positive")
    ratio = np.linalg.norm(np.asarray(grad_P, dtype=float), axis=-1) / (P + cfg.eps_p)
    return -np.expm1(-cfg.gamma * ratio)


def entropy_field(P, rho, gamma_gas: float):
    P = np.asarray(P, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(P <= 0) or np.any(rho <= 0):
        raise ValueError("pressure and density must be positive")
    return np.log(P) - gamma_gas * np.log(rho)


def thermo_terms(S, P, M_shock, spacing, amap: AffineMap, cfg: ThermoCfg):
    """The isentropic and second-law terms, unweighted."""
    GS = noad.physical_gradient(S, spacing, amap)
    GP = noad.physical_gradient(P, spacing, amap)
    iso = float(np.mean(np.linalg.norm(GS, axis=-1) * (1.0 - M_shock)))
    second = float(np.mean(np.maximum(-(GP * GS).sum(-1), 0.0) * M_shock))
    return iso, second


def thermo_loss(S, P, M_shock, spacing, amap: AffineMap, cfg: ThermoCfg) -> float:
    iso, second = thermo_terms(S, P, M_shock, spacing, amap, cfg)
    return cfg.lambda_iso * iso + cfg.lambda_2nd * second


# ---- residual reports ----------------------------------------------------

@dataclass(frozen=True)
class ResidualRow:
    equation: str
    mean_abs: float
    max_abs: float
    masked_mean_abs: float
    masked_max_abs: float


def residual_report(residuals: dict, mask) -> list:
    M = np.asarray(mask, dtype=float)
    rows = []
    for name, r in residuals.items():
        a = np.abs(np.asarray(r, dtype=float))
        rows.append(ResidualRow(name, float(a.mean()), float(a.max()), float((M * a).mean()), float((M * a).max())))
    return rows


def write_residual_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["equation", "mean_abs", "max_abs", "masked_mean_abs", "masked_max_abs"])
        for r in rows:
            w.writerow([r.equation, repr(r.mean_abs), repr(r.max_abs), repr(r.masked_mean_abs), repr(r.masked_max_abs)])


# ---- differentiable branch losses ----------------------------------------

@dataclass(eq=False)
class PhysicsContext:
    """Static geometry and settings for the branch losses.

    Derivatives are taken on the coarse field and interpolated to the fine grid,
    where the pointwise values live.
    """
    coarse_spacing: np.ndarray
    fine_dims: tuple
    amap: AffineMap
    mask: np.ndarray            # fine grid
    normals: np.ndarray | None = None
    wall: np.ndarray | None = None
    rho: float = 1.0
    p: float = 2.0
    shock: ShockMaskCfg = ShockMaskCfg()
    thermo: ThermoCfg = ThermoCfg()


def _coarse_grad(u, ctx: PhysicsContext):
    G = noad.physical_gradient(u, ctx.coarse_spacing, ctx.amap)
    return interp_coarse(G, ctx.fine_dims)


def _coarse_grad_adjoint(gG, coarse_dims, ctx: PhysicsContext):
    g = interp_coarse_adjoint(gG, coarse_dims)
    return noad.physical_gradient_adjoint(g, ctx.coarse_spacing, ctx.amap)


def external_value_grad(u_coarse, u_fine, ctx: PhysicsContext, with_grad=True):
    """Masked continuity + momentum loss on channels [u, v, w, P].

    Velocities are taken from u_fine after wall projection; gradients come from
    u_coarse.  Returns (loss, grad wrt u_coarse, grad wrt u_fine, residuals).
    """
    cd = u_coarse.shape[:3]
    G = _coarse_grad(u_coarse, ctx)  # (..., C, 3)
    Vh = tangent_project(u_fine[..., 0:3], ctx.normals, ctx.wall)
    cont = G[..., 0, 0] + G[..., 1, 1] + G[..., 2, 2]
    mom = (Vh[..., None, :] * G[..., 0:3, :]).sum(-1) + G[..., 3, :] / ctx.rho
    det = jacobian_det(ctx.amap)
    p = ctx.p
    acc = np.abs(cont) ** p + (np.abs(mom) ** p).sum(-1)
    n = cont.size
    loss = float((ctx.mask * acc).sum() / n * det)
    res = {"continuity": cont, "momentum_x": mom[..., 0], "momentum_y": mom[..., 1], "momentum_z": mom[..., 2]}
    if not with_grad:
        return loss, None, None, res
    c = ctx.mask * det / n
    gcont = c * p * np.abs(cont) ** (p - 1) * np.sign(cont)
    gmom = c[..., None] * p * np.abs(mom) ** (p - 1) * np.sign(mom)
    gG = np.zeros_like(G)
    for i in range(3):
        gG[..., i, i] += gcont
    gG[..., 0:3, :] += gmom[..., :, None] * Vh[..., None, :]
    gG[..., 3, :] += gmom / ctx.rho
    gVh = (gmom[..., :, None] * G[..., 0:3, :]).sum(-2)
    g_fine = np.zeros_like(u_fine)
    g_fine[..., 0:3] = tangent_project(gVh, ctx.normals, ctx.wall)
    g_coarse = _coarse_grad_adjoint(gG, cd, ctx)
    return loss, g_coarse, g_fine, res


def _safe_unit(G):
    nrm = np.linalg.norm(G, axis=-1)
    unit = np.divide(G, nrm[..., None], out=np.zeros_like(G), where=nrm[..., None] > 0)
    return nrm, unit


def internal_value_grad(u_coarse, u_fine, ctx: PhysicsContext, with_grad=True):
    """EOS + entropy loss on log-state channels [ln P, ln rho, ln T]."""
    cfg, sc = ctx.thermo, ctx.shock
    cd = u_coarse.shape[:3]
    Pc = np.exp(u_coarse[..., 0])
    Sc = u_coarse[..., 0] - cfg.gamma_gas * u_coarse[..., 1]
    GP = _coarse_grad(Pc, ctx)
    GS = _coarse_grad(Sc, ctx)
    P = np.exp(u_fine[..., 0])
    rho = np.exp(u_fine[..., 1])
    T = np.exp(u_fine[..., 2])
    n = P.size
    e = P - rho * cfg.r_gas * T
    nP, uP = _safe_unit(GP)
    nS, uS = _safe_unit(GS)
    q = nP / (P + sc.eps_p)
    ex = np.exp(-sc.gamma * q)
    Ms = 1.0 - ex
    dot = (GP * GS).sum(-1)
    rl = np.maximum(-dot, 0.0)
    eos = np.abs(e).sum() / n
    iso = (nS * (1.0 - Ms)).sum() / n
    second = (rl * Ms).sum() / n
    loss = float(eos + cfg.lambda_iso * iso + cfg.lambda_2nd * second)
    res = {"eos": e, "entropy_gradient": nS, "second_law": rl * Ms, "shock_mask": Ms}
    if not with_grad:
        return loss, None, None, res
    se = np.sign(e) / n
    gP = se.copy()
    grho = -se * cfg.r_gas * T
    gT = -se * cfg.r_gas * rho
    gMs = (-cfg.lambda_iso * nS + cfg.lambda_2nd * rl) / n
    gGS = (cfg.lambda_iso * (1.0 - Ms) / n)[..., None] * uS
    gdot = -(cfg.lambda_2nd * Ms / n) * (dot < 0)
    gGP = gdot[..., None] * GS
    gGS += gdot[..., None] * GP
    gq = gMs * sc.gamma * ex
    gP -= gq * nP / (P + sc.eps_p) ** 2
    gGP += (gq / (P + sc.eps_p))[..., None] * uP
    g_fine = np.zeros_like(u_fine)
    g_fine[..., 0] = gP * P
    g_fine[..., 1] = grho * rho
    g_fine[..., 2] = gT * T
    gPc = _coarse_grad_adjoint(gGP, cd, ctx)
    gSc = _coarse_grad_adjoint(gGS, cd, ctx)
    g_coarse = np.zeros_like(u_coarse)
    g_coarse[..., 0] = gPc * Pc + gSc
    g_coarse[..., 1] = -cfg.gamma_gas * gSc
    return loss, g_coarse, g_fine, res
