"""Analytic flow cases and error metrics."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

CASES = ("UniformFlow", "PotentialSphere", "RigidRotation", "IsentropicNozzle1D", "EntropyJump1D", "GaussianBump")
EXTERNAL_CASES = ("UniformFlow", "PotentialSphere", "RigidRotation")
INTERNAL_CASES = ("IsentropicNozzle1D", "EntropyJump1D")

_FAR = 1e3


@dataclass(frozen=True)
class CaseSpec:
    name: str
    uinf: tuple = (1.0, 0.0, 0.0)
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    rho: float = 1.0
    p_inf: float = 1.0
    omega: float = 1.0
    gamma_gas: float = 1.4
    r_gas: float = 1.0
    # internal-flow cases: x is the duct axis, walls at |y| = |z| = half_width
    half_width: float = 1.0
    length: float = 1.0
    amplitude: float = 0.2
    mass_flux: float = 1.0
    pressure_ratio: float = 2.0
    entropy_jump: float = 0.25
    jump_width: float = 0.1
    jump_position: float = 0.0
    bump_center: tuple = (0.0, 0.0, 0.0)
    bump_width: float = 0.08
    bump_amplitude: float = 1.0
    interior: str = "clamp"  # PotentialSphere inside the body: "clamp" or "analytic"

    def __post_init__(self):
        if self.name not in CASES:
            raise ValueError(f"unknown case {self.name!r}")
        for k in ("radius", "rho", "r_gas", "half_width", "length", "jump_width", "bump_width"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if not self.gamma_gas > 1:
            raise ValueError("gamma_gas must exceed 1")
        if self.pressure_ratio <= 0 or self.p_inf <= 0:
            raise ValueError("pressures must be positive")
        if abs(self.amplitude) >= 1:
            raise ValueError("nozzle amplitude must be below 1")
        if self.interior not in ("clamp", "analytic"):
            raise ValueError("interior must be 'clamp' or 'analytic'")

    @property
    def domain(self) -> str:
        return "internal" if self.name in INTERNAL_CASES else "external"

    def with_(self, **kw) -> "CaseSpec":
        return replace(self, **kw)


def _radial(X, center):
    d = X - np.asarray(center, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    n = np.divide(d, r[..., None], out=np.zeros_like(d), where=r[..., None] > 0)
    n[r == 0] = (1.0, 0.0, 0.0)
    return r, n


def _sphere_velocity(Y, U, a):
    """Potential flow past a sphere at the origin; Y are offsets from the centre."""
    r2 = (Y * Y).sum(-1)
    r = np.sqrt(r2)
    a3 = a**3
    Ux = (Y * U).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return U * (1.0 + a3 / (2.0 * r**3))[..., None] - (1.5 * a3 * Ux / r**5)[..., None] * Y


def _duct_geometry(X, s: CaseSpec):
    ay, az = np.abs(X[..., 1]), np.abs(X[..., 2])
    sdf = s.half_width - np.maximum(ay, az)
    n = np.zeros_like(X)
    use_y = ay >= az
    n[..., 1] = np.where(use_y, -np.where(X[..., 1] >= 0, 1.0, -1.0), 0.0)
    n[..., 2] = np.where(use_y, 0.0, -np.where(X[..., 2] >= 0, 1.0, -1.0))
    return sdf, n


def _dyadic(x, bits=30):
    # snapping to a dyadic lattice keeps affine images of the profile exact in floating point
    return np.round(x * 2.0**bits) / 2.0**bits


def gen_case(spec: CaseSpec, points) -> dict:
    """Fields V, P, rho, T, S, sdf, normals (and u for GaussianBump) at points (..., 3)."""
    X = np.asarray(points, dtype=float)
    if X.shape[-1] != 3:
        raise ValueError("points must have 3 coordinates on the last axis")
    shape = X.shape[:-1]
    ones = np.ones(shape)
    U = np.asarray(spec.uinf, dtype=float)
    out = {}
    name = spec.name
    if name == "UniformFlow":
        V = np.broadcast_to(U, X.shape).copy()
        P = spec.p_inf * ones
        rho = spec.rho * ones
        sdf, normals = _FAR * ones, np.broadcast_to([0.0, 0.0, 1.0], X.shape).copy()
    elif name == "PotentialSphere":
        c = np.asarray(spec.center, dtype=float)
        r, normals = _radial(X, c)
        Y = X - c
        if spec.interior == "clamp":
            # inside the body reuse the wall state along each ray
            inside = r < spec.radius
            Y = np.where(inside[..., None], normals * spec.radius, Y)
        V = _sphere_velocity(Y, U, spec.radius)
        P = spec.p_inf + 0.5 * spec.rho * ((U * U).sum() - (V * V).sum(-1))
        rho = spec.rho * ones
        sdf = r - spec.radius
    elif name == "RigidRotation":
        V = np.stack([-spec.omega * X[..., 1], spec.omega * X[..., 0], np.zeros(shape)], axis=-1)
        P = spec.p_inf + 0.5 * spec.rho * spec.omega**2 * (X[..., 0] ** 2 + X[..., 1] ** 2)
        rho = spec.rho * ones
        sdf, normals = _FAR * ones, np.broadcast_to([0.0, 0.0, 1.0], X.shape).copy()
    elif name == "IsentropicNozzle1D":
        rho = spec.rho * (1.0 + spec.amplitude * np.sin(np.pi * X[..., 0] / spec.length))
        P = spec.p_inf * (rho / spec.rho) ** spec.gamma_gas
        V = np.zeros(X.shape)
        V[..., 0] = spec.mass_flux / rho
        sdf, normals = _duct_geometry(X, spec)
    elif name == "EntropyJump1D":
        H = _dyadic(0.5 * (1.0 + np.tanh((X[..., 0] - spec.jump_position) / spec.jump_width)))
        P = spec.p_inf + spec.p_inf * (spec.pressure_ratio - 1.0) * H
        S = spec.entropy_jump * H
        rho = np.exp((np.log(P) - S) / spec.gamma_gas)
        V = np.zeros(X.shape)
        V[..., 0] = spec.mass_flux / rho
        sdf, normals = _duct_geometry(X, spec)
        out["S"] = S
    elif name == "GaussianBump":
        c = np.asarray(spec.bump_center, dtype=float)
        r, normals = _radial(X, c)
        bg = 0.5 + 0.3 * np.sin(X[..., 0]) + 0.2 * np.cos(X[..., 1]) + 0.1 * X[..., 2]
        bump = spec.bump_amplitude * np.exp(-0.5 * (r / spec.bump_width) ** 2)
        out["u"] = bg + bump
        out["background"] = bg
        V = np.zeros(X.shape)
        P = spec.p_inf * ones
        rho = spec.rho * ones
        sdf = r - spec.bump_width
    else:  # pragma: no cover
        raise ValueError(name)
    T = P / (rho * spec.r_gas)
    out.update({"V": V, "P": P, "rho": rho, "T": T, "sdf": sdf, "normals": normals})
    if "S" not in out and np.all(P > 0):
        out["S"] = np.log(P) - spec.gamma_gas * np.log(rho)
    return out


# ---- metrics -------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    mae: float
    rel_l2: float
    rrmse_field: float
    rrmse_scalar: float | None = None


def _as_list(x):
    return [np.asarray(s, dtype=float) for s in x]


def rrmse_field(preds, refs) -> float:
    """Per-sample squared error normalized by node count and the reference max-norm."""
    P, R = _as_list(preds), _as_list(refs)
    if len(P) != len(R) or len(R) == 0:
        raise ValueError("need equal, non-empty sample sets")
    acc = 0.0
    for p, r in zip(P, R):
        if p.shape != r.shape:
            raise ValueError("sample shapes differ")
        inf = np.abs(r).max()
        if inf == 0:
            raise ValueError("reference with zero max-norm")
        N = r.shape[0] if r.ndim > 1 else r.size
        acc += ((r - p) ** 2).sum() / (N * inf**2)
    return float(np.sqrt(acc / len(R)))


def rrmse_scalar(preds, refs) -> float:
    p = np.asarray(preds, dtype=float).ravel()
    r = np.asarray(refs, dtype=float).ravel()
    if p.shape != r.shape or r.size == 0:
        raise ValueError("need equal, non-empty lists")
    if np.any(r == 0):
        raise ValueError("zero reference value")
    return float(np.sqrt(np.mean((r - p) ** 2 / r**2)))


def mae(pred, ref) -> float:
    p, r = np.asarray(pred, dtype=float), np.asarray(ref, dtype=float)
    if p.shape != r.shape:
        raise ValueError("shapes differ")
    return float(np.abs(p - r).mean())


def rel_l2(pred, ref) -> float:
    p, r = np.asarray(pred, dtype=float), np.asarray(ref, dtype=float)
    if p.shape != r.shape:
        raise ValueError("shapes differ")
    return float(np.linalg.norm(p - r) / np.linalg.norm(r))


def metric_report(pred, ref) -> MetricReport:
    return MetricReport(mae(pred, ref), rel_l2(pred, ref), rrmse_field([pred], [ref]))
