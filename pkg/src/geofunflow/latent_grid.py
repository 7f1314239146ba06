"""Regular latent grids and the diagonal affine map between physical and latent space.

Latent coordinates are xi = (X - c) / (R + eps).  The regularizer eps keeps the
inverse scale bounded when a radius collapses, so pulled-back gradients never
exceed 1/eps in magnitude.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class AffineMap:
    center: np.ndarray
    radii: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        r = np.asarray(self.radii, dtype=float).reshape(3)
        eps = float(self.eps)
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(r)) and np.isfinite(eps)):
            raise ValueError("affine map entries must be finite")
        if eps < 0:
            raise ValueError("eps must be non-negative")
        # a collapsed radius is tolerated only while eps keeps the scale positive
        if np.any(r < 0) or np.any(r + eps <= 0):
            raise ValueError("radii must be positive (or zero with eps > 0)")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "eps", eps)

    @property
    def scale(self) -> np.ndarray:
        return self.radii + self.eps

    def __repr__(self):
        return f"AffineMap(center={self.center.tolist()}, radii={self.radii.tolist()}, eps={self.eps!r})"


def to_latent(X, amap: AffineMap) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return (X - amap.center) / amap.scale


def from_latent(xi, amap: AffineMap) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    return xi * amap.scale + amap.center


def pullback_gradient(latent_grad, amap: AffineMap) -> np.ndarray:
    """Physical gradient from a latent one; the last axis holds the 3 components."""
    g = np.asarray(latent_grad, dtype=float)
    if g.shape[-1] != 3:
        raise ValueError("last axis must hold 3 gradient components")
    if not np.all(np.isfinite(g)):
        raise ValueError("latent gradient contains non-finite entries")
    return g / amap.scale


def jacobian_det(amap: AffineMap) -> float:
    return float(np.prod(1.0 / amap.scale))


def fit_map(points, eps: float = DEFAULT_EPS) -> AffineMap:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 2:
        raise ValueError("fit_map needs at least two points")
    lo, hi = P.min(axis=0), P.max(axis=0)
    half = 0.5 * (hi - lo)
    if not np.any(half > 0):
        raise ValueError("fit_map needs at least two distinct points")
    half = np.where(half > 0, half, half.max() * 1e-3)
    return AffineMap(0.5 * (hi + lo), half, eps)


@dataclass(eq=False)
class LatentGrid:
    values: np.ndarray  # (H, W, D, C)
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 3:
            v = v[..., None]
        if v.ndim != 4 or min(v.shape) < 1:
            raise ValueError("values must have shape (H, W, D, C)")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        h = np.asarray(self.spacing, dtype=float).reshape(3)
        if np.any(h <= 0):
            raise ValueError("spacing must be positive")
        self.values = v
        self.spacing = h
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)

    @property
    def dims(self) -> tuple:
        return tuple(self.values.shape[:3])

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def node_coords(self) -> np.ndarray:
        return grid_coords(self.dims, self.origin, self.spacing)

    def with_values(self, values) -> "LatentGrid":
        return LatentGrid(values, self.spacing, self.origin)


def unit_grid_geometry(dims):
    """Spacing and origin of a grid whose nodes span [-1, 1] on every axis."""
    n = np.asarray(dims, dtype=float)
    if np.any(n < 2):
        raise ValueError("each axis needs at least two nodes")
    return 2.0 / (n - 1), -np.ones(3)


def grid_coords(dims, origin, spacing) -> np.ndarray:
    axes = [origin[i] + spacing[i] * np.arange(dims[i]) for i in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def trilinear_weights(dims, origin, spacing, xi, tol=1e-9):
    """Flat node indices (P, 8) and weights (P, 8) for trilinear sampling at xi (P, 3)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    n = np.asarray(dims)
    if np.any(n < 2):
        raise ValueError("trilinear sampling needs two nodes per axis")
    s = (xi - origin) / spacing
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite query")
    if np.any(s < -tol) or np.any(s > (n - 1) + tol):
        raise ValueError("query outside grid bounds")
    s = np.clip(s, 0.0, n - 1)
    i0 = np.minimum(np.floor(s).astype(np.int64), n - 2)
    f = s - i0
    idx = np.empty((len(xi), 8), dtype=np.int64)
    w = np.empty((len(xi), 8))
    col = 0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                idx[:, col] = ((i0[:, 0] + dx) * n[1] + (i0[:, 1] + dy)) * n[2] + (i0[:, 2] + dz)
                w[:, col] = wx * wy * wz
                col += 1
    return idx, w


def trilinear_matrix(dims, origin, spacing, xi):
    """Sparse (P, H*W*D) sampling operator; its transpose scatters back to nodes."""
    from scipy.sparse import csr_matrix

    idx, w = trilinear_weights(dims, origin, spacing, xi)
    P = idx.shape[0]
    rows = np.repeat(np.arange(P), 8)
    return csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(P, int(np.prod(dims))))


def sample_trilinear(grid: LatentGrid, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    idx, w = trilinear_weights(grid.dims, grid.origin, grid.spacing, xi)
    flat = grid.values.reshape(-1, grid.channels)
    out = np.einsum("pk,pkc->pc", w, flat[idx])
    return out[0] if single else out


# ---- .gfield text format -------------------------------------------------

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_gfield(path, grid: LatentGrid, amap: AffineMap) -> None:
    H, W, D = grid.dims
    lines = [
        f"dims {H} {W} {D} {grid.channels}",
        f"origin {_fmt(grid.origin)}",
        f"spacing {_fmt(grid.spacing)}",
        f"map {_fmt(amap.center)} {_fmt(amap.radii)} {amap.eps!r}",
        "",
    ]
    flat = grid.values.reshape(-1, grid.channels)
    lines.extend(_fmt(row) for row in flat.tolist())
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_gfield(path):
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    head, sep, body = text.partition("\n\n")
    if not sep:
        raise ValueError(f"{path}: missing blank line after header")
    header = {}
    for line in head.splitlines():
        key, *rest = line.split()
        header[key] = rest
    try:
        H, W, D, C = (int(v) for v in header["dims"])
        origin = np.array([float(v) for v in header["origin"]])
        spacing = np.array([float(v) for v in header["spacing"]])
        m = [float(v) for v in header["map"]]
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed header") from exc
    if len(m) != 7:
        raise ValueError(f"{path}: map line needs c(3) R(3) eps")
    vals = np.array(body.split(), dtype=float)
    if vals.size != H * W * D * C:
        raise ValueError(f"{path}: expected {H * W * D * C} values, found {vals.size}")
    grid = LatentGrid(vals.reshape(H, W, D, C), spacing, origin)
    return grid, AffineMap(m[0:3], m[3:6], m[6])
