"""Latent conditional flow matching with a small hand-differentiated velocity model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NumericalError
from .latent_grid import AffineMap


def interpolate(z0, z1, t):
    """Linear path with noise at t=0 and data at t=1; returns (z_t, target velocity)."""
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    if z0.shape != z1.shape:
        raise ValueError("z0 and z1 must have the same shape")
    t = np.asarray(t, dtype=float)
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * z0 + t * z1, z1 - z0


def time_features(t) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1)
    return np.stack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)], axis=1)


_ACT = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


@dataclass(eq=False)
class VelocityModel:
    """Perceptron v(z, t); the time features [t, sin 2pi t, cos 2pi t] are appended to z.

    With `skip` set, a time-dependent scalar multiple of z is added to the
    output: (skip . [1, t, sin 2pi t, cos 2pi t]) z.  A narrow hidden layer
    cannot carry the full-rank -z/(1-t) part of the flow-matching target on
    large states, and this term supplies it.
    """
    weights: list
    biases: list
    activation: str = "tanh"
    time_embedding: bool = True
    skip: np.ndarray | None = None

    @classmethod
    def init(cls, rng, state_dim: int, hidden=(64, 64), activation="tanh", time_embedding=True,
             out_scale: float = 1.0, skip: bool = False):
        widths = [state_dim + (3 if time_embedding else 0), *hidden, state_dim]
        Ws, bs = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            s = out_scale if i == len(widths) - 2 else 1.0
            Ws.append(rng.normal(0.0, s / np.sqrt(a), (a, b)))
            bs.append(np.zeros(b))
        return cls(Ws, bs, activation, time_embedding, np.zeros(4) if skip else None)

    @property
    def state_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self):
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        if self.skip is not None:
            out["skip"] = self.skip
        return out

    def forward(self, z, t):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        tf = time_features(np.broadcast_to(t, (len(z),)))
        x = np.hstack([z, tf]) if self.time_embedding else z
        act, _ = _ACT[self.activation]
        acts = [x]
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            y = acts[-1] @ W + b
            acts.append(act(y) if i < n - 1 else y)
        out = acts[-1]
        if self.skip is not None:
            phi = np.hstack([np.ones((len(z), 1)), tf])
            out = out + (phi @ self.skip)[:, None] * z
            acts.append((z, phi))
        return out, acts

    def backward(self, acts, gout):
        _, dact = _ACT[self.activation]
        grads = {}
        g = gout
        n = len(self.weights)
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                g = g * dact(acts[i + 1])
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.weights[i].T
        gz = g[:, : self.state_dim] if self.time_embedding else g
        if self.skip is not None:
            z, phi = acts[n + 1]
            grads["skip"] = phi.T @ (gout * z).sum(axis=1)
            gz = gz + (phi @ self.skip)[:, None] * gout
        return grads, gz


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(eq=False)
class SEGate:
    W1: np.ndarray  # (C/r, C)
    W2: np.ndarray  # (C, C/r)

    @classmethod
    def init(cls, rng, channels: int, reduction: int = 2, scale: float = 0.5):
        if channels % reduction:
            raise ValueError("reduction ratio must divide the channel count")
        m = channels // reduction
        return cls(rng.normal(0, scale / np.sqrt(channels), (m, channels)),
                   rng.normal(0, scale / np.sqrt(m), (channels, m)))

    @classmethod
    def zeros(cls, channels: int, reduction: int = 1):
        m = channels // reduction
        return cls(np.zeros((m, channels)), np.zeros((channels, m)))

    def params(self):
        return {"W1": self.W1, "W2": self.W2}


def se_recalibrate(features, gate: SEGate, return_cache=False):
    """Channel gating of (..., C) grids; a leading batch axis is allowed."""
    x = np.asarray(features, dtype=float)
    batched = x.ndim == 5
    xb = x if batched else x[None]
    C = xb.shape[-1]
    if gate.W1.shape[1] != C:
        raise ValueError("gate width does not match channels")
    zc = xb.reshape(len(xb), -1, C).mean(axis=1)
    a = zc @ gate.W1.T
    r = np.maximum(a, 0.0)
    s = _sigmoid(r @ gate.W2.T)
    out = xb * s[:, None, None, None, :]
    out = out if batched else out[0]
    if return_cache:
        return out, (xb, zc, a, r, s, batched)
    return out


def se_backward(gate: SEGate, cache, gout):
    xb, zc, a, r, s, batched = cache
    g = gout if batched else gout[None]
    C = xb.shape[-1]
    nsp = xb[0].size // C
    gs = (g * xb).reshape(len(xb), -1, C).sum(axis=1)
    gpre = gs * s * (1.0 - s)
    grads = {"W2": gpre.T @ r}
    ga = (gpre @ gate.W2) * (a > 0)
    grads["W1"] = ga.T @ zc
    gzc = ga @ gate.W1
    gx = g * s[:, None, None, None, :] + (gzc / nsp)[:, None, None, None, :]
    return grads, (gx if batched else gx[0])


@dataclass(eq=False)
class FlowNet:
    """Velocity model optionally preceded by SE gating over a (H, W, D, C) latent layout."""
    model: VelocityModel
    gate: SEGate | None = None
    grid_shape: tuple | None = None

    def params(self):
        out = {f"v_{k}": v for k, v in self.model.params().items()}
        if self.gate is not None:
            out.update({f"se_{k}": v for k, v in self.gate.params().items()})
        return out

    def forward(self, z, t):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        gcache = None
        if self.gate is not None:
            zg, gcache = se_recalibrate(z.reshape(len(z), *self.grid_shape), self.gate, return_cache=True)
            zin = zg.reshape(len(z), -1)
        else:
            zin = z
        v, acts = self.model.forward(zin, t)
        return v, (acts, gcache)

    def backward(self, cache, gv):
        acts, gcache = cache
        mg, gz = self.model.backward(acts, gv)
        grads = {f"v_{k}": g for k, g in mg.items()}
        if self.gate is not None:
            sg, gz = se_backward(self.gate, gcache, gz.reshape(len(gz), *self.grid_shape))
            grads.update({f"se_{k}": g for k, g in sg.items()})
            gz = gz.reshape(len(gz), -1)
        return grads, gz

    def velocity(self, z, t):
        z = np.asarray(z, dtype=float)
        v, _ = self.forward(z, np.full(len(np.atleast_2d(z)), float(t)) if np.ndim(t) == 0 else t)
        return v.reshape(z.shape)


def as_flownet(model) -> FlowNet:
    return model if isinstance(model, FlowNet) else FlowNet(model)


def fm_loss(model, z0, z1, t) -> float:
    net = as_flownet(model)
    zt, target = interpolate(np.atleast_2d(z0), np.atleast_2d(z1), np.asarray(t, dtype=float).reshape(-1))
    if len(zt) == 0:
        raise ValueError("empty batch")
    v, _ = net.forward(zt, np.asarray(t, dtype=float).reshape(-1))
    return float(((v - target) ** 2).sum(axis=1).mean())


def model_grad(model, z0, z1, t):
    """Loss and parameter gradients of the flow-matching regression."""
    net = as_flownet(model)
    t = np.asarray(t, dtype=float).reshape(-1)
    zt, target = interpolate(np.atleast_2d(z0), np.atleast_2d(z1), t)
    v, cache = net.forward(zt, t)
    r = v - target
    loss = float((r * r).sum(axis=1).mean())
    if not np.isfinite(loss):
        raise NumericalError("non-finite flow-matching loss")
    grads, _ = net.backward(cache, 2.0 * r / len(r))
    return loss, grads


@dataclass(eq=False)
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict, frozen=()):
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, p in params.items():
            if name in frozen or name not in grads:
                continue
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass(frozen=True)
class OdeSolverCfg:
    steps: int = 32
    scheme: str = "rk4"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.scheme not in ("euler", "rk4"):
            raise ValueError("scheme must be 'euler' or 'rk4'")


def _velocity_fn(model):
    if callable(model) and not isinstance(model, (FlowNet, VelocityModel)):
        return model
    return as_flownet(model).velocity


def sample(model, z0, cfg: OdeSolverCfg, t0: float = 0.0, t1: float = 1.0, callback=None):
    """Integrate dz/dt = v(z, t) from t0 to t1; `model` may be a FlowNet or a callable v(z, t)."""
    v = _velocity_fn(model)
    z = np.array(z0, dtype=float)
    dt = (t1 - t0) / cfg.steps
    for i in range(cfg.steps):
        t = t0 + i * dt
        if callback is not None:
            callback(t, z)
        if cfg.scheme == "euler":
            z = z + dt * v(z, t)
        else:
            k1 = v(z, t)
            k2 = v(z + 0.5 * dt * k1, t + 0.5 * dt)
            k3 = v(z + 0.5 * dt * k2, t + 0.5 * dt)
            k4 = v(z + dt * k3, t + dt)
            z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise NumericalError("non-finite sampler state", step=i)
    if callback is not None:
        callback(t1, z)
    return z


def reconstruct_velocity(v, amap: AffineMap) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise ValueError("last axis must hold 3 velocity components")
    return v * amap.scale


@dataclass(frozen=True)
class GronwallResult:
    measured: float
    bound: float
    passed: bool


def gronwall_check(L: float, eps_v: float, A=None, z0=None, direction=None, steps: int = 1000) -> GronwallResult:
    """Endpoint gap between v(z)=Az and the same field plus a constant error of size eps_v."""
    if A is None:
        A = L * np.eye(3)
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    if not np.isclose(np.linalg.norm(A, 2), L, rtol=1e-12, atol=1e-15):
        raise ValueError("spectral norm of A must equal L")
    z0 = np.ones(d) if z0 is None else np.asarray(z0, dtype=float)
    u = np.eye(d)[0] if direction is None else np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    cfg = OdeSolverCfg(steps=steps, scheme="rk4")
    za = sample(lambda z, t: A @ z, z0, cfg)
    zb = sample(lambda z, t: A @ z + eps_v * u, z0, cfg)
    measured = float(np.linalg.norm(za - zb))
    bound = float(eps_v * np.exp(L))
    return GronwallResult(measured, bound, measured <= bound * (1.0 + 1e-3))


def w2_assignment(A, B) -> float:
    """Empirical W2 between equal-size uniform sample sets via an exact assignment."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != B.shape:
        raise ValueError("sample sets must have equal size and dimension")
    if len(A) > 256:
        raise ValueError("at most 256 samples per set")
    cost = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def uq_variance(model, n: int, seed: int, cfg: OdeSolverCfg, state_dim: int, z0=None):
    """Per-entry unbiased variance over n endpoints from independent standard-normal starts."""
    if n < 2:
        raise ValueError("need n >= 2 draws")
    if z0 is None:
        z0 = np.random.default_rng(seed).standard_normal((n, state_dim))
    ends = sample(model, z0, cfg)
    return ends.var(axis=0, ddof=1), ends
