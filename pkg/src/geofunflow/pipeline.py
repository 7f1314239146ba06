"""Training pipeline: problem setup, FAE warm-up, flow training, checkpoints, sampling."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import noad, physics
from .cases import CaseSpec, gen_case
from .errors import NumericalError
from .flow import Adam, FlowNet, OdeSolverCfg, SEGate, VelocityModel, interpolate, sample, uq_variance
from .geometry import PointCloud, embed_queries, estimate_curvature, fibonacci_sphere
from .latent_grid import AffineMap, LatentGrid, grid_coords, to_latent, unit_grid_geometry, write_gfield
from .schedule import HomotopyCfg, RelaxCfg, lambda_homotopy, lambda_phys, phase_of
from .spectral import (
    FaeGeometry,
    FeatureAutoEncoder,
    SatoOperator,
    fae_train,
    interp_coarse,
    interp_coarse_adjoint,
    local_features,
    sato_backward,
    sato_refine,
    spectral_conv_backward,
    standardize,
)

CKPT_VERSION = "geofunflow-ckpt/1"

EXTERNAL_CHANNELS = ("u", "v", "w", "P")
INTERNAL_CHANNELS = ("lnP", "lnrho", "lnT")


# ---- configuration -------------------------------------------------------

_SECTIONS = {
    "run": ("seed", "domain", "epochs", "batch", "lr"),
    "case": ("case", "samples", "speed_min", "speed_max", "angle_max", "radius", "gamma_gas", "r_gas"),
    "grid": ("latent_dims", "channels", "fine_factor", "box", "volume_points", "surface_points"),
    "fae": ("warmup_steps", "fae_lr", "fae_batch", "lambda_reg", "modes", "mp_layers", "kernel_hidden",
            "k_anchor"),
    "flow": ("hidden", "activation", "se_reduction", "out_scale"),
    "sato": ("sato_window", "sato_hidden"),
    "schedule": ("tau1", "tau2", "lambda_max", "lambda_base", "eta"),
    "physics": ("layer_width", "wall_band", "p_norm", "shock_gamma", "lambda_iso", "lambda_2nd"),
    "sampler": ("ode_steps", "scheme", "uq_n"),
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    domain: str = "external"
    epochs: int = 300
    batch: int = 8
    lr: float = 1e-3
    case: str = "PotentialSphere"
    samples: int = 64
    speed_min: float = 0.6
    speed_max: float = 1.4
    angle_max: float = 0.5
    radius: float = 1.0
    gamma_gas: float = 1.4
    r_gas: float = 1.0
    latent_dims: int = 16
    channels: int = 8
    fine_factor: int = 1
    box: float = 2.0
    volume_points: int = 2000
    surface_points: int = 800
    warmup_steps: int = 300
    fae_lr: float = 1e-2
    fae_batch: int = 4
    lambda_reg: float = 1e-6
    modes: int = 4
    mp_layers: int = 1
    kernel_hidden: int = 16
    k_anchor: int = 8
    hidden: tuple = (16,)
    activation: str = "tanh"
    se_reduction: int = 2
    out_scale: float = 0.1
    sato_window: int = 3
    sato_hidden: int = 8
    tau1: float = 0.2
    tau2: float = 0.7
    lambda_max: float = 1.0
    lambda_base: float = 1.0
    eta: float = 0.3
    layer_width: float = 0.3
    wall_band: float = 0.3
    p_norm: float = 2.0
    shock_gamma: float = 1.0
    lambda_iso: float = 1.0
    lambda_2nd: float = 1.0
    ode_steps: int = 32
    scheme: str = "rk4"
    uq_n: int = 30

    def __post_init__(self):
        if self.domain not in ("external", "internal"):
            raise ValueError("domain must be 'external' or 'internal'")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1 or self.samples < 1:
            raise ValueError("batch and samples must be positive")
        if self.latent_dims < 5:
            raise ValueError("latent_dims must be at least 5 for the stencils")
        if self.fine_factor < 1:
            raise ValueError("fine_factor must be >= 1")
        if not self.speed_min <= self.speed_max:
            raise ValueError("speed_min must not exceed speed_max")
        if self.channels % self.se_reduction:
            raise ValueError("se_reduction must divide channels")
        if self.sato_window < 1 or self.sato_window % 2 == 0:
            raise ValueError("sato_window must be odd")
        if self.box <= 0 or self.radius <= 0 or self.radius >= self.box:
            raise ValueError("need 0 < radius < box")
        # sub-configs validate themselves
        self.homotopy()
        self.relax()
        self.case_spec()
        OdeSolverCfg(self.ode_steps, self.scheme)

    # sub-configs
    def homotopy(self) -> HomotopyCfg:
        return HomotopyCfg(self.tau1, self.tau2, self.lambda_max)

    def relax(self) -> RelaxCfg:
        return RelaxCfg(self.lambda_base, self.eta)

    def case_spec(self) -> CaseSpec:
        kw = dict(radius=self.radius, gamma_gas=self.gamma_gas, r_gas=self.r_gas)
        if self.case in ("IsentropicNozzle1D", "EntropyJump1D"):
            kw.update(half_width=self.box, length=self.box)
        return CaseSpec(self.case, **kw)

    @property
    def dims(self) -> tuple:
        return (self.latent_dims,) * 3

    @property
    def fine_dims(self) -> tuple:
        return ((self.latent_dims - 1) * self.fine_factor + 1,) * 3

    @property
    def out_channels(self) -> int:
        return len(EXTERNAL_CHANNELS if self.domain == "external" else INTERNAL_CHANNELS)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # text form
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec, keys in _SECTIONS.items():
            cp[sec] = {k: _fmt_value(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        known = {k: sec for sec, keys in _SECTIONS.items() for k in keys}
        kw = {}
        for sec in cp.sections():
            if sec not in _SECTIONS:
                raise ValueError(f"unknown config section [{sec}]")
            for k, v in cp[sec].items():
                if known.get(k) != sec:
                    raise ValueError(f"unknown key {k!r} in [{sec}]")
                kw[k] = _parse_value(k, v)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _fmt_value(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, text):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {text!r}") from exc
    return text.strip()


# ---- problem setup -------------------------------------------------------

def _duct_surface(half: float, m: int) -> PointCloud:
    """Points on the four walls |y| = half, |z| = half with normals into the duct."""
    s = np.linspace(-half, half, m)
    A, B = np.meshgrid(s, s, indexing="ij")
    a, b = A.ravel(), B.ravel()
    pos, nrm = [], []
    for axis in (1, 2):
        other = 3 - axis
        for sign in (1.0, -1.0):
            P = np.zeros((len(a), 3))
            P[:, 0] = a
            P[:, other] = b
            P[:, axis] = sign * half
            n = np.zeros_like(P)
            n[:, axis] = -sign
            pos.append(P)
            nrm.append(n)
    return PointCloud(np.vstack(pos), np.vstack(nrm))


def _variants(cfg: RunConfig, base: CaseSpec, rng) -> list:
    out = []
    for _ in range(cfg.samples):
        if base.name in ("UniformFlow", "PotentialSphere"):
            speed = rng.uniform(cfg.speed_min, cfg.speed_max)
            ang = rng.uniform(-cfg.angle_max, cfg.angle_max)
            out.append(base.with_(uinf=(speed * np.cos(ang), speed * np.sin(ang), 0.0)))
        elif base.name == "RigidRotation":
            out.append(base.with_(omega=rng.uniform(cfg.speed_min, cfg.speed_max)))
        elif base.name == "IsentropicNozzle1D":
            out.append(base.with_(amplitude=rng.uniform(0.05, 0.25)))
        elif base.name == "EntropyJump1D":
            out.append(base.with_(jump_position=rng.uniform(-0.5, 0.5)))
        else:
            raise ValueError(f"case {base.name} has no training variants")
    return out


def _targets(fields: dict, domain: str) -> np.ndarray:
    if domain == "external":
        return np.concatenate([fields["V"], fields["P"][..., None]], axis=-1)
    return np.stack([np.log(fields["P"]), np.log(fields["rho"]), np.log(fields["T"])], axis=-1)


@dataclass(eq=False)
class Problem:
    cfg: RunConfig
    amap: AffineMap
    spacing: np.ndarray
    origin: np.ndarray
    fine_spacing: np.ndarray
    fine_origin: np.ndarray
    surface: PointCloud
    curvature: np.ndarray
    points: np.ndarray          # physical sample points (N, 3)
    variants: list
    values: np.ndarray          # (S, N, Cout)
    geom: FaeGeometry | None
    Z: np.ndarray               # SATO features on the fine grid
    sdf: np.ndarray             # fine grid
    ctx: physics.PhysicsContext

    @property
    def state_dim(self) -> int:
        return int(np.prod(self.cfg.dims)) * self.cfg.channels


def build_problem(cfg: RunConfig) -> Problem:
    """Deterministic data set, geometry features and physics context for a config."""
    rng = np.random.default_rng([cfg.seed, 0])
    amap = AffineMap(np.zeros(3), np.full(3, cfg.box))
    spacing, origin = unit_grid_geometry(cfg.dims)
    fspacing, forigin = unit_grid_geometry(cfg.fine_dims)
    base = cfg.case_spec()
    if cfg.domain == "external":
        if base.name not in ("UniformFlow", "PotentialSphere", "RigidRotation"):
            raise ValueError(f"{base.name} is not an external-flow case")
        surface = fibonacci_sphere(cfg.surface_points, base.radius, base.center)
    else:
        if base.name not in ("IsentropicNozzle1D", "EntropyJump1D"):
            raise ValueError(f"{base.name} is not an internal-flow case")
        surface = _duct_surface(cfg.box, max(3, int(round(np.sqrt(cfg.surface_points / 4)))))
    curvature, _ = estimate_curvature(surface, 8)
    vol = rng.uniform(-cfg.box, cfg.box, size=(cfg.volume_points, 3))
    points = np.vstack([vol, surface.positions])
    variants = _variants(cfg, base, rng)
    values = np.stack([_targets(gen_case(v, points), cfg.domain) for v in variants])

    fine_X = grid_coords(cfg.fine_dims, forigin, fspacing) * amap.scale
    fE = embed_queries(fine_X.reshape(-1, 3), surface, curvature).reshape(*cfg.fine_dims, -1)
    Z = standardize(local_features(fE, cfg.sato_window))
    sdf = fE[..., 6]
    nrm = fE[..., 3:6]
    if cfg.domain == "external":
        mask = physics.phase_mask(sdf, physics.PhaseMaskCfg.for_layer(cfg.layer_width))
        wall = np.abs(sdf) <= cfg.wall_band
    else:
        mask = np.ones(cfg.fine_dims)
        wall = None
    ctx = physics.PhysicsContext(
        coarse_spacing=spacing, fine_dims=cfg.fine_dims, amap=amap, mask=mask, normals=nrm, wall=wall,
        rho=1.0, p=cfg.p_norm, shock=physics.ShockMaskCfg(gamma=cfg.shock_gamma),
        thermo=physics.ThermoCfg(cfg.lambda_iso, cfg.lambda_2nd, cfg.r_gas, cfg.gamma_gas))
    # the FAE geometry needs the projector, so init_models fills it in
    return Problem(cfg, amap, spacing, origin, fspacing, forigin, surface, curvature, points, variants,
                   values, None, Z, sdf, ctx)


# ---- models --------------------------------------------------------------

@dataclass(eq=False)
class Models:
    fae: FeatureAutoEncoder
    net: FlowNet
    sato: SatoOperator

    def trainable(self) -> dict:
        out = {f"net_{k}": v for k, v in self.net.params().items()}
        out.update({f"sato_{k}": v for k, v in self.sato.params().items()})
        return out

    def all_params(self) -> dict:
        out = {f"fae_{k}": v for k, v in self.fae.params().items()}
        out.update(self.trainable())
        return out


def init_models(cfg: RunConfig, problem: Problem) -> Models:
    rng = np.random.default_rng([cfg.seed, 2])
    fae = FeatureAutoEncoder.init(rng, problem.values.shape[-1], cfg.out_channels, cfg.channels, cfg.dims,
                                  problem.origin, problem.spacing, (cfg.modes,) * 3, n_layers=cfg.mp_layers,
                                  hidden=cfg.kernel_hidden, k_anchor=cfg.k_anchor)
    if problem.geom is None:
        xi = to_latent(problem.points, problem.amap)
        E = embed_queries(problem.points, problem.surface, problem.curvature)
        problem.geom = FaeGeometry.build(xi, E, fae.projector)
    model = VelocityModel.init(rng, problem.state_dim, hidden=cfg.hidden, activation=cfg.activation,
                               out_scale=cfg.out_scale, skip=True)
    gate = SEGate.init(rng, cfg.channels, cfg.se_reduction)
    net = FlowNet(model, gate, (*cfg.dims, cfg.channels))
    sato = SatoOperator.init(rng, problem.Z.shape[-1], cfg.out_channels, hidden=cfg.sato_hidden,
                             window=cfg.sato_window)
    return Models(fae, net, sato)


def fae_warmup(cfg: RunConfig, problem: Problem, models: Models, log=None) -> list:
    """Fit encoder and decoder on the data set; the encoder is frozen afterwards."""
    rng = np.random.default_rng([cfg.seed, 1])
    return fae_train(models.fae, problem.geom, problem.values, cfg.warmup_steps, lr=cfg.fae_lr,
                     lambda_reg=cfg.lambda_reg, batch=cfg.fae_batch, rng=rng, log=log)


def encode_all(problem: Problem, models: Models) -> np.ndarray:
    return np.stack([models.fae.encode(problem.geom, v).ravel() for v in problem.values])


# ---- decoding and the flow objective --------------------------------------

def branch_loss(problem: Problem, u_coarse, u_fine, with_grad=True):
    if problem.cfg.domain == "external":
        return physics.external_value_grad(u_coarse, u_fine, problem.ctx, with_grad)
    return physics.internal_value_grad(u_coarse, u_fine, problem.ctx, with_grad)


def decode(problem: Problem, models: Models, z, project=True) -> np.ndarray:
    """Latent vector -> fine-grid field; wall projection in the external branch."""
    cfg = problem.cfg
    lat = np.asarray(z, dtype=float).reshape(*cfg.dims, cfg.channels)
    uc = models.fae.decode_grid(lat)
    uf = sato_refine(uc, problem.Z, problem.ctx.mask, models.sato, cfg.fine_dims)
    if project and cfg.domain == "external":
        uf = uf.copy()
        uf[..., 0:3] = physics.tangent_project(uf[..., 0:3], problem.ctx.normals, problem.ctx.wall)
    return uf


@dataclass
class Objective:
    L_FM: float
    L_TV: float
    L_phys: float
    L_total: float
    grads: dict | None = None


def flow_objective(problem: Problem, models: Models, z1, z0, t, phys_weight: float,
                   weights=(1.0, 1.0, 1.0), with_grad=True) -> Objective:
    """L_FM + L_TV + phys_weight * L_phys on one batch, with gradients for the trainable parameters.

    The physics terms act on the decoded endpoint estimate z_t + (1 - t) v.
    `weights` scales the three terms individually (used by gradient checks).
    """
    cfg = problem.cfg
    net, fae, sato = models.net, models.fae, models.sato
    z1 = np.atleast_2d(z1)
    B = len(z1)
    t = np.asarray(t, dtype=float).reshape(-1)
    zt, target = interpolate(z0, z1, t)
    v, cache = net.forward(zt, t)
    r = v - target
    L_FM = float((r * r).sum(axis=1).mean())
    zhat = zt + (1.0 - t)[:, None] * v
    w_fm, w_tv, w_ph = weights
    c_phys = phys_weight * w_ph
    need = with_grad and c_phys != 0.0
    g_zhat = np.zeros_like(zhat)
    L_TV = 0.0
    L_phys = 0.0
    shape = (*cfg.dims, cfg.channels)
    # the SATO correction depends on geometry only, so it is shared by the batch
    M = problem.ctx.mask
    R, a = sato.residual(problem.Z)
    corr = M[..., None] * (sato.alpha * R)
    g_corr = np.zeros_like(corr)
    for b in range(B):
        lat = zhat[b].reshape(shape)
        tv, gtv = physics.tv_value_grad(lat, problem.spacing, problem.amap)
        L_TV += tv / B
        uc, Xk = fae.decode_grid(lat, return_cache=True)
        uf = interp_coarse(uc, cfg.fine_dims) + corr
        lp, gc, gf, _ = branch_loss(problem, uc, uf, with_grad=need)
        L_phys += lp / B
        if not with_grad:
            continue
        g = w_tv * gtv / B
        if need:
            gf = gf * (c_phys / B)
            g_corr += gf
            gc = gc * (c_phys / B) + interp_coarse_adjoint(gf, cfg.dims)
            _, glat = spectral_conv_backward(fae.decoder, Xk, gc)
            g = g + glat
        g_zhat[b] = g.ravel()
    if need:
        sato_g, _ = sato_backward(sato, (problem.Z, a, R, M, cfg.dims), g_corr)
    else:
        sato_g = {k: np.zeros_like(p) for k, p in sato.params().items()}
    total = w_fm * L_FM + w_tv * L_TV + c_phys * L_phys
    for name, val in (("L_FM", L_FM), ("L_TV", L_TV), ("L_phys", L_phys)):
        if not np.isfinite(val):
            raise NumericalError(f"non-finite {name}")
    if not with_grad:
        return Objective(L_FM, L_TV, L_phys, total)
    gv = w_fm * 2.0 * r / B + (1.0 - t)[:, None] * g_zhat
    ng, _ = net.backward(cache, gv)
    grads = {f"net_{k}": g for k, g in ng.items()}
    grads.update({f"sato_{k}": g for k, g in sato_g.items()})
    return Objective(L_FM, L_TV, L_phys, total, grads)


# ---- training ------------------------------------------------------------

# leading eight columns are the loss curve proper; the rest are diagnostics
LOSS_COLUMNS = ("epoch", "tau", "lambda", "lambda_phys", "L_FM", "L_TV", "L_phys", "L_total",
                "phase", "composite", "L_phys_probe")


@dataclass(eq=False)
class TrainState:
    cfg: RunConfig
    problem: Problem
    models: Models
    opt: Adam
    rng: np.random.Generator
    z_data: np.ndarray
    epoch: int = 0
    history: list = field(default_factory=list)
    fae_history: list = field(default_factory=list)


def _probe(state: TrainState):
    cfg = state.cfg
    prng = np.random.default_rng([cfg.seed, 4])
    B = min(cfg.batch, len(state.z_data))
    z0 = prng.standard_normal((B, state.problem.state_dim))
    t = (np.arange(B) + 0.5) / B
    return state.z_data[:B], z0, t


def setup(cfg: RunConfig, log=None) -> TrainState:
    problem = build_problem(cfg)
    models = init_models(cfg, problem)
    fh = fae_warmup(cfg, problem, models, log=log)
    z_data = encode_all(problem, models)
    return TrainState(cfg, problem, models, Adam(lr=cfg.lr), np.random.default_rng([cfg.seed, 3]), z_data,
                      fae_history=fh)


def run_epoch(state: TrainState) -> dict:
    cfg, problem, models = state.cfg, state.problem, state.models
    e = state.epoch + 1
    tau = e / cfg.epochs
    lam = lambda_homotopy(tau, cfg.homotopy())
    lp = lambda_phys(tau, cfg.relax())
    weight = lam * lp
    params = models.trainable()
    order = state.rng.permutation(len(state.z_data))
    sums = np.zeros(4)
    nb = 0
    for start in range(0, len(order), cfg.batch):
        idx = order[start:start + cfg.batch]
        z0 = state.rng.standard_normal((len(idx), problem.state_dim))
        # stratified times: one draw per sub-interval of [0, 1]
        t = (state.rng.permutation(len(idx)) + state.rng.uniform(0.0, 1.0, size=len(idx))) / len(idx)
        obj = flow_objective(problem, models, state.z_data[idx], z0, t, weight)
        if not np.isfinite(obj.L_total):
            raise NumericalError("non-finite total loss", step=e)
        state.opt.update(params, obj.grads)
        sums += (obj.L_FM, obj.L_TV, obj.L_phys, obj.L_total)
        nb += 1
    zp1, zp0, tp = _probe(state)
    probe = flow_objective(problem, models, zp1, zp0, tp, weight, with_grad=False).L_phys
    m = sums / nb
    row = {"epoch": e, "tau": tau, "phase": phase_of(tau, cfg.homotopy()).value, "lambda": lam,
           "lambda_phys": lp, "composite": weight, "L_FM": m[0], "L_TV": m[1], "L_phys": m[2], "L_total": m[3],
           "L_phys_probe": probe}
    state.epoch = e
    state.history.append(row)
    return row


def train(cfg: RunConfig, out_dir=None, state: TrainState | None = None, stop_epoch=None, log=None) -> TrainState:
    """Run (or continue) training up to `stop_epoch` (default: all epochs)."""
    if state is None:
        state = setup(cfg)
    stop = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    while state.epoch < stop:
        row = run_epoch(state)
        if log is not None:
            log(row)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_loss_csv(os.path.join(out_dir, "loss.csv"), state.history)
        write_fae_csv(os.path.join(out_dir, "fae_loss.csv"), state.fae_history)
        save_checkpoint(os.path.join(out_dir, "checkpoint.gff"), state)
    return state


def _csv_cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([_csv_cell(row[c]) for c in LOSS_COLUMNS])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (v if k == "phase" else int(v) if k == "epoch" else float(v)) for k, v in r.items()})
    return out


def write_fae_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])


# ---- checkpoints ---------------------------------------------------------

def save_checkpoint(path, state: TrainState) -> None:
    """Text checkpoint: version line, one JSON metadata line, then one block per array.

    Array blocks are `array NAME SHAPE` followed by a line of repr() decimals, which
    round-trips float64 exactly.
    """
    meta = {
        "epoch": state.epoch,
        "digest": state.cfg.digest(),
        "config": state.cfg.to_ini(),
        "rng": state.rng.bit_generator.state,
        "adam_steps": state.opt.step_count,
        "history": state.history,
        "fae_history": [float(x) for x in state.fae_history],
    }
    arrays = {f"param/{k}": v for k, v in state.models.all_params().items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.opt.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.opt.v.items()})
    with open(path, "w") as fh:
        fh.write(CKPT_VERSION + "\n")
        fh.write("meta " + json.dumps(meta, sort_keys=True) + "\n")
        for name in sorted(arrays):
            a = np.asarray(arrays[name], dtype=float)
            shape = ",".join(str(d) for d in a.shape) or "-"
            fh.write(f"array {name} {shape}\n")
            fh.write(" ".join(repr(float(x)) for x in a.ravel()) + "\n")


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, cfg: RunConfig | None = None) -> TrainState:
    """Rebuild the full training state; the FAE is restored, not re-trained."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except UnicodeDecodeError as exc:
        raise CheckpointError("not a text checkpoint") from exc
    version = lines[0] if lines else ""
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version!r}, expected {CKPT_VERSION!r}")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise CheckpointError("checkpoint metadata line missing")
    meta = json.loads(lines[1][5:])
    arrays = {}
    i = 2
    while i < len(lines) and lines[i]:
        head = lines[i].split()
        if len(head) != 3 or head[0] != "array" or i + 1 >= len(lines):
            raise CheckpointError(f"malformed checkpoint line {i + 1}")
        shape = () if head[2] == "-" else tuple(int(d) for d in head[2].split(","))
        vals = np.array([float(x) for x in lines[i + 1].split()])
        if vals.size != int(np.prod(shape)):
            raise CheckpointError(f"array {head[1]} is truncated")
        arrays[head[1]] = vals.reshape(shape)
        i += 2
    stored = RunConfig.from_ini(meta["config"])
    if stored.digest() != meta["digest"]:
        raise CheckpointError("checkpoint config digest mismatch")
    if cfg is not None and cfg.digest() != meta["digest"]:
        raise CheckpointError("checkpoint was written for a different config")
    cfg = stored
    problem = build_problem(cfg)
    models = init_models(cfg, problem)
    for k, p in models.all_params().items():
        src = arrays.get(f"param/{k}")
        if src is None or src.shape != p.shape:
            raise CheckpointError(f"parameter {k} missing or mis-shaped")
        p[...] = src
    opt = Adam(lr=cfg.lr, step_count=meta["adam_steps"])
    for k in models.trainable():
        if f"adam_m/{k}" in arrays:
            opt.m[k] = arrays[f"adam_m/{k}"].copy()
            opt.v[k] = arrays[f"adam_v/{k}"].copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    z_data = encode_all(problem, models)
    return TrainState(cfg, problem, models, opt, rng, z_data, meta["epoch"], meta["history"],
                      meta["fae_history"])


# ---- sampling and diagnostics --------------------------------------------

def sample_latents(state: TrainState, n: int, seed: int, steps: int, scheme: str = "rk4") -> np.ndarray:
    z0 = np.random.default_rng(seed).standard_normal((n, state.problem.state_dim))
    return sample(state.models.net, z0, OdeSolverCfg(steps, scheme))


def fine_grid(problem: Problem, values) -> LatentGrid:
    return LatentGrid(values, problem.fine_spacing, problem.fine_origin)


def sample_cmd(state: TrainState, out_dir, steps: int, seed: int, n: int = 1, scheme: str = "rk4") -> list:
    """Draw, integrate, decode and write n fields; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    Z1 = sample_latents(state, n, seed, steps, scheme)
    paths = []
    for i, z in enumerate(Z1):
        u = decode(state.problem, state.models, z)
        p = os.path.join(out_dir, f"sample_{i:03d}.gfield")
        write_gfield(p, fine_grid(state.problem, u), state.problem.amap)
        paths.append(p)
    return paths


def wall_normal_violation(problem: Problem, u) -> float:
    """max |<V, n>| over wall nodes (external branch)."""
    wall = problem.ctx.wall
    if wall is None or not np.any(wall):
        return 0.0
    return float(np.abs((u[..., 0:3] * problem.ctx.normals).sum(-1))[wall].max())


def uq(state: TrainState, out_dir, n: int, seed: int, steps: int):
    """Field mean and unbiased variance over n sampled endpoints."""
    os.makedirs(out_dir, exist_ok=True)
    _, ends = uq_variance(state.models.net, n, seed, OdeSolverCfg(steps, state.cfg.scheme),
                          state.problem.state_dim)
    fields = np.stack([decode(state.problem, state.models, z) for z in ends])
    mean = fields.mean(axis=0)
    var = fields.var(axis=0, ddof=1)
    write_gfield(os.path.join(out_dir, "uq_mean.gfield"), fine_grid(state.problem, mean), state.problem.amap)
    write_gfield(os.path.join(out_dir, "uq_var.gfield"), fine_grid(state.problem, var), state.problem.amap)
    names = EXTERNAL_CHANNELS if state.cfg.domain == "external" else INTERNAL_CHANNELS
    with open(os.path.join(out_dir, "uq_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "mean_variance", "max_variance"])
        for c, name in enumerate(names):
            w.writerow([name, repr(float(var[..., c].mean())), repr(float(var[..., c].max()))])
    return mean, var


def residual_trajectory(state: TrainState, rows: int, seed: int, steps: int) -> list:
    """(t, residual) at `rows` uniform times; internal branch: entropy + EOS loss, external: masked NS loss."""
    if rows < 2:
        raise ValueError("need at least 2 rows")
    problem, models = state.problem, state.models
    z = np.random.default_rng(seed).standard_normal((1, problem.state_dim))
    ts = np.linspace(0.0, 1.0, rows)
    sub = max(1, int(np.ceil(steps / (rows - 1))))
    out = []
    for i, t in enumerate(ts):
        if i > 0:
            z = sample(models.net, z, OdeSolverCfg(sub, state.cfg.scheme), ts[i - 1], t)
        lat = z[0].reshape(*state.cfg.dims, state.cfg.channels)
        uc = models.fae.decode_grid(lat)
        uf = sato_refine(uc, problem.Z, problem.ctx.mask, models.sato, state.cfg.fine_dims)
        loss, *_ = branch_loss(problem, uc, uf, with_grad=False)
        out.append((float(t), float(loss)))
    return out


def analytic_residuals(cfg: RunConfig, problem: Problem | None = None):
    """Residual fields of the configured analytic case on the fine grid, plus the loss mask."""
    problem = build_problem(cfg) if problem is None else problem
    X = grid_coords(cfg.fine_dims, problem.fine_origin, problem.fine_spacing) * problem.amap.scale
    f = gen_case(cfg.case_spec(), X)
    if cfg.domain == "external":
        res = physics.ns_residual({"u": f["V"][..., 0], "v": f["V"][..., 1], "w": f["V"][..., 2], "P": f["P"]},
                                  problem.fine_spacing, problem.amap, f["rho"])
    else:
        th = problem.ctx.thermo
        GP = noad.physical_gradient(f["P"], problem.fine_spacing, problem.amap)
        Ms = physics.shock_mask(f["P"], GP, problem.ctx.shock)
        GS = noad.physical_gradient(f["S"], problem.fine_spacing, problem.amap)
        res = {"eos": f["P"] - f["rho"] * th.r_gas * f["T"],
               "entropy_gradient": np.linalg.norm(GS, axis=-1) * (1.0 - Ms),
               "second_law": np.maximum(-(GP * GS).sum(-1), 0.0) * Ms}
    return res, problem.ctx.mask
