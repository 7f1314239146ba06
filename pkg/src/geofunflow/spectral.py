"""Band-limited spectral decoding, SATO fine-scale correction and the FAE pathway."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import noad
from .errors import NumericalError
from .flow import Adam
from .geometry import (EMBED_WIDTH, KnnGraph, MessagePassingLayer, NWProjector, knn_query,
                       message_pass, message_pass_backward, nw_apply, nw_apply_backward)
from .latent_grid import trilinear_matrix

_AX = (-4, -3, -2)  # spatial axes of (..., H, W, D, C) arrays


def dft3(u):
    u = np.asarray(u)
    if u.ndim < 3 or min(u.shape[:3]) < 2:
        raise ValueError("dft3 needs at least two nodes per axis")
    return np.fft.fftn(u, axes=(0, 1, 2))


def idft3(U):
    return np.fft.ifftn(U, axes=(0, 1, 2))


@dataclass(frozen=True)
class TruncationSpec:
    modes: tuple

    def __post_init__(self):
        if len(self.modes) != 3 or any(int(m) < 1 for m in self.modes):
            raise ValueError("need three positive mode counts")
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))

    @classmethod
    def full(cls, dims):
        return cls(tuple(max(1, d // 2) for d in dims))

    def check(self, dims):
        if any(m > d / 2 for m, d in zip(self.modes, dims)):
            raise ValueError(f"modes {self.modes} exceed half of dims {tuple(dims)}")


def _freqs(n):
    return np.rint(np.fft.fftfreq(n) * n).astype(int)


def retained_mask(dims, trunc: TruncationSpec) -> np.ndarray:
    trunc.check(dims)
    m = [np.abs(_freqs(n)) <= k for n, k in zip(dims, trunc.modes)]
    return m[0][:, None, None] & m[1][None, :, None] & m[2][None, None, :]


@dataclass(eq=False)
class SpectralMultiplier:
    """Complex channel-mixing matrix per retained mode, stored as real and imaginary parts."""
    dims: tuple
    trunc: TruncationSpec
    w_re: np.ndarray  # (K, Cout, Cin)
    w_im: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.index = np.flatnonzero(retained_mask(self.dims, self.trunc))
        if self.w_re.shape[0] != len(self.index) or self.w_re.shape != self.w_im.shape:
            raise ValueError("multiplier shape does not match the retained modes")

    @classmethod
    def identity(cls, dims, trunc, channels: int, scale: float = 1.0):
        K = int(retained_mask(dims, trunc).sum())
        w = np.broadcast_to(scale * np.eye(channels), (K, channels, channels)).copy()
        return cls(dims, trunc, w, np.zeros_like(w))

    @classmethod
    def zeros(cls, dims, trunc, c_out: int, c_in: int):
        K = int(retained_mask(dims, trunc).sum())
        return cls(dims, trunc, np.zeros((K, c_out, c_in)), np.zeros((K, c_out, c_in)))

    @classmethod
    def init(cls, rng, dims, trunc, c_out: int, c_in: int, scale: float = 1.0):
        K = int(retained_mask(dims, trunc).sum())
        s = scale / np.sqrt(2 * c_in)
        return cls(dims, trunc, rng.normal(0, s, (K, c_out, c_in)), rng.normal(0, s, (K, c_out, c_in)))

    @property
    def weights(self):
        return self.w_re + 1j * self.w_im

    def params(self):
        return {"re": self.w_re, "im": self.w_im}


def spectral_conv(u, mult: SpectralMultiplier, return_cache=False):
    """Re F^-1(R . F u) with modes outside the truncation cube zeroed; u is (..., H, W, D, Cin)."""
    u = np.asarray(u, dtype=float)
    dims = u.shape[-4:-1]
    if tuple(dims) != mult.dims:
        raise ValueError("field dims do not match the multiplier")
    lead = u.shape[:-4]
    N = int(np.prod(dims))
    X = np.fft.fftn(u, axes=_AX).reshape(*lead, N, u.shape[-1])
    Xk = X[..., mult.index, :]
    W = mult.weights
    Yk = np.einsum("...ki,koi->...ko", Xk, W)
    Y = np.zeros((*lead, N, W.shape[1]), dtype=complex)
    Y[..., mult.index, :] = Yk
    y = np.fft.ifftn(Y.reshape(*lead, *dims, W.shape[1]), axes=_AX).real
    if return_cache:
        return y, Xk
    return y


def spectral_conv_backward(mult: SpectralMultiplier, Xk, g):
    """Gradients of the real and imaginary weights, and of the input field."""
    g = np.asarray(g, dtype=float)
    dims = g.shape[-4:-1]
    lead = g.shape[:-4]
    N = int(np.prod(dims))
    G = np.fft.ifftn(g, axes=_AX).reshape(*lead, N, g.shape[-1])
    gY = np.conj(G[..., mult.index, :])
    lead_ax = "".join("abcdefg"[: len(lead)])
    gW = np.einsum(f"{lead_ax}ko,{lead_ax}ki->koi", gY, np.conj(Xk))
    gXk = np.einsum("koi,...ko->...ki", np.conj(mult.weights), gY)
    gX = np.zeros((*lead, N, Xk.shape[-1]), dtype=complex)
    gX[..., mult.index, :] = gXk
    gu = N * np.fft.ifftn(gX.reshape(*lead, *dims, Xk.shape[-1]), axes=_AX).real
    return {"re": gW.real, "im": gW.imag}, gu


# ---- trilinear upsampling ------------------------------------------------

@lru_cache(maxsize=32)
def _interp_matrix(nc: int, nf: int) -> np.ndarray:
    if nf < nc:
        raise ValueError("fine dims must not be smaller than coarse dims")
    M = np.zeros((nf, nc))
    for j in range(nf):
        s = j * (nc - 1) / (nf - 1) if nf > 1 else 0.0
        i0 = min(int(np.floor(s)), nc - 2) if nc > 1 else 0
        f = s - i0
        M[j, i0] += 1.0 - f
        if nc > 1:
            M[j, i0 + 1] += f
    M.setflags(write=False)
    return M


def _apply_axes(u, mats, transpose=False):
    out = u
    for ax, M in enumerate(mats):
        A = M.T if transpose else M
        out = np.moveaxis(np.tensordot(A, np.moveaxis(out, ax, 0), axes=(1, 0)), 0, ax)
    return out


def interp_coarse(u_coarse, fine_dims):
    """Node-aligned trilinear upsampling over the three leading axes."""
    u = np.asarray(u_coarse, dtype=float)
    cd = u.shape[:3]
    if tuple(cd) == tuple(fine_dims):
        return u.copy()
    return _apply_axes(u, [_interp_matrix(c, f) for c, f in zip(cd, fine_dims)])


def interp_coarse_adjoint(g_fine, coarse_dims):
    g = np.asarray(g_fine, dtype=float)
    fd = g.shape[:3]
    if tuple(fd) == tuple(coarse_dims):
        return g.copy()
    return _apply_axes(g, [_interp_matrix(c, f) for c, f in zip(coarse_dims, fd)], transpose=True)


# ---- SATO ----------------------------------------------------------------

def local_features(embedding_grid, window: int = 3) -> np.ndarray:
    """Concatenate the per-node embedding over a w^3 window (edge-clamped)."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and positive")
    E = np.asarray(embedding_grid, dtype=float)
    r = window // 2
    padded = np.pad(E, [(r, r)] * 3 + [(0, 0)], mode="edge")
    H, W, D = E.shape[:3]
    parts = [padded[i:i + H, j:j + W, k:k + D]
             for i in range(window) for j in range(window) for k in range(window)]
    return np.concatenate(parts, axis=-1)


def standardize(Z):
    mu = Z.reshape(-1, Z.shape[-1]).mean(axis=0)
    sd = Z.reshape(-1, Z.shape[-1]).std(axis=0)
    return (Z - mu) / np.where(sd > 0, sd, 1.0)


@dataclass(eq=False)
class SatoOperator:
    window: int
    A1: np.ndarray
    b1: np.ndarray
    A2: np.ndarray
    b2: np.ndarray
    alpha: np.ndarray

    @classmethod
    def init(cls, rng, n_features: int, channels: int, hidden: int = 16, window: int = 3,
             alpha: float = 0.0):
        return cls(window, rng.normal(0, 1 / np.sqrt(n_features), (n_features, hidden)), np.zeros(hidden),
                   rng.normal(0, 1 / np.sqrt(hidden), (hidden, channels)), np.zeros(channels),
                   np.full(channels, float(alpha)))

    @classmethod
    def zero(cls, n_features: int, channels: int, hidden: int = 1, window: int = 3):
        """Operator whose residual network is identically zero."""
        return cls(window, np.zeros((n_features, hidden)), np.zeros(hidden),
                   np.zeros((hidden, channels)), np.zeros(channels), np.ones(channels))

    def params(self):
        return {"A1": self.A1, "b1": self.b1, "A2": self.A2, "b2": self.b2, "alpha": self.alpha}

    def residual(self, Z):
        a = np.tanh(Z @ self.A1 + self.b1)
        return a @ self.A2 + self.b2, a


def sato_refine(u_coarse, Z, mask, op: SatoOperator, fine_dims=None, return_cache=False):
    u = np.asarray(u_coarse, dtype=float)
    fine_dims = tuple(Z.shape[:3]) if fine_dims is None else tuple(fine_dims)
    M = np.asarray(mask, dtype=float)
    if tuple(Z.shape[:3]) != fine_dims or tuple(M.shape[:3]) != fine_dims:
        raise ValueError("features and mask must live on the fine grid")
    if np.any(M < 0) or np.any(M > 1):
        raise ValueError("mask values must lie in [0, 1]")
    R, a = op.residual(Z)
    if R.shape[-1] != u.shape[-1]:
        raise ValueError("residual channels do not match the field")
    base = interp_coarse(u, fine_dims)
    out = base + M[..., None] * (op.alpha * R)
    if return_cache:
        return out, (Z, a, R, M, u.shape[:3])
    return out


def sato_backward(op: SatoOperator, cache, g_fine):
    Z, a, R, M, cdims = cache
    gm = g_fine * M[..., None]
    grads = {"alpha": (gm * R).reshape(-1, R.shape[-1]).sum(0)}
    gR = (gm * op.alpha).reshape(-1, R.shape[-1])
    A = a.reshape(-1, a.shape[-1])
    grads["A2"] = A.T @ gR
    grads["b2"] = gR.sum(0)
    ga = (gR @ op.A2.T) * (1.0 - A * A)
    grads["A1"] = Z.reshape(-1, Z.shape[-1]).T @ ga
    grads["b1"] = ga.sum(0)
    return grads, interp_coarse_adjoint(g_fine, cdims)


def sato_local_residual(u_fine, operator, window, spacing) -> float:
    """Squared norm of operator(u_fine) over a tuple-of-slices window."""
    r = operator(np.asarray(u_fine, dtype=float), spacing)[window]
    return float((r * r).sum())


def train_sato(op: SatoOperator, u_coarse, Z, mask, u_target, spacing, source, window,
               steps: int = 1000, lr: float = 1e-2, log=None):
    """Fit the SATO residual to data error plus the local Laplacian residual.

    The residual is Lap_h(u) - source inside `window`; `source` should be the
    discrete Laplacian of the target so both terms share a minimizer.  Each
    term is divided by the mean square of its own target, so the two carry
    equal weight in relative terms whatever the grid spacing.
    """
    opt = Adam(lr=lr)
    params = op.params()
    src = np.asarray(source, dtype=float)[window]
    n_data = u_target.size * max(float(np.mean(u_target * u_target)), 1e-300)
    n_res = src.size * max(float(np.mean(src * src)), 1e-300)
    for step in range(steps):
        u, cache = sato_refine(u_coarse, Z, mask, op, return_cache=True)
        e = u - u_target
        r = np.zeros_like(u)
        r[window] = noad.laplacian(u, spacing)[window] - src
        loss = float((e * e).sum() / n_data + (r * r).sum() / n_res)
        if not np.isfinite(loss):
            raise NumericalError("SATO training diverged", step=step)
        g = 2.0 * e / n_data + noad.laplacian_adjoint(2.0 * r / n_res, spacing)
        grads, _ = sato_backward(op, cache, g)
        opt.update(params, grads)
        if log is not None:
            log(step, loss)
    return op


# ---- feature autoencoder -------------------------------------------------

@dataclass(eq=False)
class FaeGeometry:
    """Precomputed structure for encoding fields sampled on a fixed point set."""
    latent_points: np.ndarray   # (N, 3)
    embedding: np.ndarray       # (N, 9)
    graph: KnnGraph
    nbh: object
    sampler: object             # sparse (N, nodes)

    @classmethod
    def build(cls, latent_points, embedding, projector: NWProjector, k: int = 8):
        xi = np.asarray(latent_points, dtype=float)
        idx, _ = knn_query(xi, xi, k, exclude_self=True)
        graph = KnnGraph(k, idx, xi)
        nbh = projector.neighborhood(xi)
        S = trilinear_matrix(projector.dims, projector.origin, projector.spacing, xi)
        return cls(xi, np.asarray(embedding, dtype=float), graph, nbh, S)


@dataclass(eq=False)
class FeatureAutoEncoder:
    lift_W: np.ndarray
    lift_b: np.ndarray
    layers: list
    projector: NWProjector
    decoder: SpectralMultiplier
    dec_bias: np.ndarray

    @classmethod
    def init(cls, rng, in_channels: int, out_channels: int, latent_channels: int, dims, origin, spacing,
             modes, n_layers: int = 1, hidden: int = 16, k_anchor: int = 8):
        C = latent_channels
        width = in_channels + EMBED_WIDTH
        proj = NWProjector.init(rng, dims, origin, spacing, C, hidden=hidden, k_anchor=k_anchor)
        # decoder starts at zero so the initial reconstruction is the per-channel bias
        dec = SpectralMultiplier.zeros(dims, TruncationSpec(modes), out_channels, C)
        return cls(rng.normal(0, 1 / np.sqrt(width), (width, C)), np.zeros(C),
                   [MessagePassingLayer.init(rng, C, hidden) for _ in range(n_layers)],
                   proj, dec, np.zeros(out_channels))

    @property
    def latent_channels(self) -> int:
        return self.lift_W.shape[1]

    def params(self):
        out = {"lift_W": self.lift_W, "lift_b": self.lift_b, "dec_bias": self.dec_bias}
        for i, layer in enumerate(self.layers):
            out.update({f"mp{i}_{k}": v for k, v in layer.params().items()})
        out.update({f"nw_{k}": v for k, v in self.projector.params().items()})
        out.update({f"dec_{k}": v for k, v in self.decoder.params().items()})
        return out

    def encoder_params(self):
        return {k: v for k, v in self.params().items() if not k.startswith("dec")}

    def encode(self, geom: FaeGeometry, values, return_cache=False):
        vals = np.asarray(values, dtype=float).reshape(len(geom.embedding), -1)
        x = np.hstack([vals, geom.embedding])
        h = x @ self.lift_W + self.lift_b
        caches = []
        for layer in self.layers:
            h, c = message_pass(geom.graph, h, layer, return_cache=True)
            caches.append(c)
        lat, ncache = nw_apply(self.projector, geom.nbh, h, normalize=True, return_cache=True)
        lat = lat.reshape(*self.projector.dims, -1)
        if return_cache:
            return lat, (x, caches, ncache)
        return lat

    def encode_backward(self, geom: FaeGeometry, cache, g_lat):
        x, caches, ncache = cache
        grads = {}
        ng, gh = nw_apply_backward(self.projector, geom.nbh, ncache, g_lat.reshape(-1, g_lat.shape[-1]))
        grads.update({f"nw_{k}": v for k, v in ng.items()})
        for i in range(len(self.layers) - 1, -1, -1):
            lg, gh = message_pass_backward(geom.graph, self.layers[i], caches[i], gh)
            grads.update({f"mp{i}_{k}": v for k, v in lg.items()})
        grads["lift_W"] = x.T @ gh
        grads["lift_b"] = gh.sum(0)
        return grads

    def decode_grid(self, latent, return_cache=False):
        y, Xk = spectral_conv(latent, self.decoder, return_cache=True)
        y = y + self.dec_bias
        return (y, Xk) if return_cache else y

    def decode_points(self, geom: FaeGeometry, latent):
        grid = self.decode_grid(latent)
        return geom.sampler @ grid.reshape(-1, grid.shape[-1])


def fae_reconstruct(fae: FeatureAutoEncoder, geom: FaeGeometry, values, lambda_reg: float = 0.0,
                    with_grad: bool = False):
    """Per-point predictions and the loss mean((u - u_hat)^2) + lambda_reg ||latent||^2."""
    vals = np.asarray(values, dtype=float).reshape(len(geom.embedding), -1)
    lat, ecache = fae.encode(geom, vals, return_cache=True)
    grid, Xk = fae.decode_grid(lat, return_cache=True)
    pred = geom.sampler @ grid.reshape(-1, grid.shape[-1])
    err = pred - vals
    loss = float((err * err).mean() + lambda_reg * (lat * lat).sum())
    if not with_grad:
        return pred, loss
    gpred = 2.0 * err / err.size
    ggrid = (geom.sampler.T @ gpred).reshape(grid.shape)
    grads = {"dec_bias": ggrid.reshape(-1, grid.shape[-1]).sum(0)}
    dg, glat = spectral_conv_backward(fae.decoder, Xk, ggrid)
    grads.update({f"dec_{k}": v for k, v in dg.items()})
    glat = glat + 2.0 * lambda_reg * lat
    grads.update(fae.encode_backward(geom, ecache, glat))
    return pred, loss, grads


def fae_train(fae: FeatureAutoEncoder, geom: FaeGeometry, samples, steps: int, lr: float = 1e-2,
              lambda_reg: float = 1e-6, batch: int = 4, rng=None, log=None):
    """Adam on the reconstruction loss over a stack of samples (S, N, Cout)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[None]
    rng = np.random.default_rng(0) if rng is None else rng
    if steps > 0 and not np.any(fae.dec_bias):
        fae.dec_bias[:] = samples.reshape(-1, samples.shape[-1]).mean(axis=0)
    opt = Adam(lr=lr)
    params = fae.params()
    history = []
    for step in range(steps):
        pick = rng.choice(len(samples), size=min(batch, len(samples)), replace=False)
        total = 0.0
        acc = {k: np.zeros_like(v) for k, v in params.items()}
        for s in np.sort(pick):
            _, loss, grads = fae_reconstruct(fae, geom, samples[s], lambda_reg, with_grad=True)
            total += loss / len(pick)
            for k, g in grads.items():
                acc[k] += g / len(pick)
        if not np.isfinite(total):
            raise NumericalError("FAE warm-up diverged", step=step)
        opt.update(params, acc)
        history.append(total)
        if log is not None:
            log(step, total)
    return history
