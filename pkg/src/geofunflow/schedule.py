"""Physics-weight schedules: cosine homotopy ramp and exponential relaxation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction


@dataclass(frozen=True)
class HomotopyCfg:
    tau1: float = 0.2
    tau2: float = 0.7
    lambda_max: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.tau1 < self.tau2 <= 1.0):
            raise ValueError("need 0 <= tau1 < tau2 <= 1")
        if not self.lambda_max >= 0:
            raise ValueError("lambda_max must be non-negative")


@dataclass(frozen=True)
class RelaxCfg:
    lambda_base: float = 1.0
    eta: float = 0.3

    def __post_init__(self):
        if not self.lambda_base > 0:
            raise ValueError("lambda_base must be positive")
        if not (0.0 < self.eta < 1.0):
            raise ValueError("eta must lie strictly inside (0, 1)")


class Phase(str, Enum):
    TOPOLOGY_SEARCH = "TopologySearch"
    QUASI_STATIC_INJECTION = "QuasiStaticInjection"
    PHYSICS_LOCK_IN = "PhysicsLockIn"


def _check_tau(tau):
    if not (0.0 <= tau <= 1.0):
        raise ValueError("tau must lie in [0, 1]")


def lambda_homotopy(tau: float, cfg: HomotopyCfg = HomotopyCfg()) -> float:
    _check_tau(tau)
    if tau <= cfg.tau1:
        return 0.0
    if tau >= cfg.tau2:
        return cfg.lambda_max
    if tau == 0.5 * (cfg.tau1 + cfg.tau2):
        # the float-rounded midpoint counts as the midpoint
        return 0.5 * cfg.lambda_max
    # (1 - cos(pi r)) / 2 written around the ramp centre.  s is formed exactly
    # from the shortest decimal forms, so a decimal midpoint such as 0.45 for
    # (0.2, 0.7) maps to s = 0 too
    t, t1, t2 = (Fraction(repr(float(x))) for x in (tau, cfg.tau1, cfg.tau2))
    s = (2 * t - t1 - t2) / (t2 - t1)
    return 0.5 * cfg.lambda_max * (1.0 + math.sin(0.5 * math.pi * float(s)))


def lambda_homotopy_slope(tau: float, cfg: HomotopyCfg = HomotopyCfg()) -> float:
    """Analytic derivative; zero outside the ramp and at both junctions."""
    _check_tau(tau)
    if tau <= cfg.tau1 or tau >= cfg.tau2:
        return 0.0
    width = cfg.tau2 - cfg.tau1
    return 0.5 * cfg.lambda_max * math.pi / width * math.sin(math.pi * (tau - cfg.tau1) / width)


def lambda_phys(tau: float, cfg: RelaxCfg = RelaxCfg()) -> float:
    _check_tau(tau)
    return cfg.lambda_base * cfg.eta**tau


def composite_weight(tau: float, hcfg: HomotopyCfg = HomotopyCfg(), rcfg: RelaxCfg = RelaxCfg()) -> float:
    return lambda_homotopy(tau, hcfg) * lambda_phys(tau, rcfg)


def phase_of(tau: float, cfg: HomotopyCfg = HomotopyCfg()) -> Phase:
    _check_tau(tau)
    if tau < cfg.tau1:
        return Phase.TOPOLOGY_SEARCH
    if tau <= cfg.tau2:
        return Phase.QUASI_STATIC_INJECTION
    return Phase.PHYSICS_LOCK_IN


@dataclass(frozen=True)
class C1Report:
    mismatch_tau1: float
    mismatch_tau2: float

    @property
    def worst(self) -> float:
        return max(self.mismatch_tau1, self.mismatch_tau2)


def c1_check(cfg: HomotopyCfg, dtau: float) -> C1Report:
    """Gap between left and right difference quotients at both junctions."""
    if not dtau > 0:
        raise ValueError("dtau must be positive")

    def lam(t):
        return lambda_homotopy(min(max(t, 0.0), 1.0), cfg)

    out = []
    for t in (cfg.tau1, cfg.tau2):
        left = (lam(t) - lam(t - dtau)) / dtau
        right = (lam(t + dtau) - lam(t)) / dtau
        out.append(abs(right - left))
    return C1Report(*out)


def schedule_table(epochs: int, hcfg: HomotopyCfg = HomotopyCfg(), rcfg: RelaxCfg = RelaxCfg()):
    """Rows (tau, lambda, lambda_phys, composite, phase) for tau = epoch / E."""
    rows = []
    for e in range(epochs + 1):
        tau = e / epochs
        lam = lambda_homotopy(tau, hcfg)
        lp = lambda_phys(tau, rcfg)
        rows.append((tau, lam, lp, lam * lp, phase_of(tau, hcfg).value))
    return rows
