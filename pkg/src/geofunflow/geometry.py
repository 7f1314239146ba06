"""Point-cloud geometry features, k-NN message passing and the NW latent projection."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .latent_grid import LatentGrid, grid_coords


@dataclass(eq=False)
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(P) < 1:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(P)):
            raise ValueError("point coordinates must be finite")
        self.positions = P
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if n.shape != P.shape:
                raise ValueError("normals must match positions")
            if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
                raise ValueError("normals must have unit norm")
            self.normals = n

    def __len__(self):
        return len(self.positions)


# ---- nearest neighbours --------------------------------------------------

def _sorted_rows(d2, idx, k):
    order = np.lexsort((idx, d2), axis=-1)[:, :k]
    return np.take_along_axis(idx, order, 1), np.take_along_axis(d2, order, 1)


def knn_query(ref, queries, k: int, exclude_self: bool = False):
    """Exact k nearest rows of `ref` for each query; ties go to the lower index.

    Returns (indices, squared distances), both (M, k).  With exclude_self the
    queries are `ref` itself and each point's own index is skipped.
    """
    ref = np.asarray(ref, dtype=float)
    queries = np.asarray(queries, dtype=float)
    N, M = len(ref), len(queries)
    if k < 1:
        raise ValueError("k must be positive")
    if k + int(exclude_self) > N:
        raise ValueError(f"k={k} too large for {N} points")
    m = min(N, k + int(exclude_self) + 4)
    _, cand = cKDTree(ref).query(queries, k=m)
    cand = np.asarray(cand, dtype=np.int64).reshape(M, m)
    d2 = ((ref[cand] - queries[:, None, :]) ** 2).sum(-1)
    if exclude_self:
        d2 = np.where(cand == np.arange(M)[:, None], np.inf, d2)
    idx, dd = _sorted_rows(d2, cand, k)
    if m < N:
        # a tie may straddle the candidate cut; rescan those rows exhaustively
        last = np.where(np.isfinite(d2), d2, -np.inf).max(axis=1)
        risky = np.nonzero(last <= dd[:, -1] * (1 + 1e-12) + 1e-300)[0]
        for lo in range(0, len(risky), 256):
            rows = risky[lo:lo + 256]
            full = ((ref[None, :, :] - queries[rows, None, :]) ** 2).sum(-1)
            if exclude_self:
                full[np.arange(len(rows)), rows] = np.inf
            all_idx = np.broadcast_to(np.arange(N), full.shape)
            idx[rows], dd[rows] = _sorted_rows(full, all_idx, k)
    return idx, dd


@dataclass(eq=False)
class KnnGraph:
    k: int
    neighbors: np.ndarray  # (N, k)
    positions: np.ndarray


def knn_graph(pc: PointCloud, k: int) -> KnnGraph:
    if k >= len(pc):
        raise ValueError("k must be smaller than the number of points")
    idx, _ = knn_query(pc.positions, pc.positions, k, exclude_self=True)
    return KnnGraph(k, idx, pc.positions)


# ---- local surface analysis ----------------------------------------------

def _local_pca(pc: PointCloud, k: int):
    if not (3 <= k < len(pc)):
        raise ValueError("need N > k >= 3")
    g = knn_graph(pc, k)
    nb = np.concatenate([np.arange(len(pc))[:, None], g.neighbors], axis=1)
    pts = pc.positions[nb]
    centred = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / nb.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    radius = np.sqrt(((pts[:, 1:] - pc.positions[:, None]) ** 2).sum(-1).max(axis=1))
    return np.clip(evals, 0.0, None), evecs, radius


def _degenerate(evals):
    # rank < 2: the middle eigenvalue vanishes against the largest
    return evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300)


def estimate_normals(pc: PointCloud, k: int):
    """Unit normals (N, 3) and a degeneracy flag per point."""
    evals, evecs, _ = _local_pca(pc, k)
    n = evecs[:, :, 0]
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    out = pc.positions - pc.positions.mean(axis=0)
    dots = (n * out).sum(1)
    scale = np.linalg.norm(out, axis=1) + 1e-300
    # flat clouds give no outward hint; fall back to the sign of the dominant component
    dom = n[np.arange(len(n)), np.abs(n).argmax(axis=1)]
    sgn = np.where(np.abs(dots) > 1e-9 * scale, np.sign(dots), np.sign(dom))
    return n * sgn[:, None], _degenerate(evals)


def estimate_curvature(pc: PointCloud, k: int):
    evals, _, radius = _local_pca(pc, k)
    total = evals.sum(axis=1)
    variation = np.divide(evals[:, 0], total, out=np.zeros_like(total), where=total > 0)
    return variation / np.maximum(radius, 1e-300), _degenerate(evals)


def nearest_surface(queries, pc: PointCloud):
    """Signed distance, nearest index for query points (M, 3)."""
    if pc.normals is None:
        raise ValueError("signed distance needs normals")
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    idx, d2 = knn_query(pc.positions, q, 1)
    idx, d = idx[:, 0], np.sqrt(d2[:, 0])
    side = ((q - pc.positions[idx]) * pc.normals[idx]).sum(1)
    return np.where(side < 0, -d, d), idx


def signed_distance(query, pc: PointCloud):
    sdf, _ = nearest_surface(query, pc)
    return float(sdf[0]) if np.ndim(query) == 1 else sdf


EMBED_WIDTH = 9


def embed(pc: PointCloud, k: int):
    """[x, n, sdf, kappa, theta_dummy] per surface point plus degeneracy flags."""
    if pc.normals is None:
        normals, flags = estimate_normals(pc, k)
    else:
        normals, flags = pc.normals, np.zeros(len(pc), dtype=bool)
    kappa, kflags = estimate_curvature(pc, k)
    E = np.zeros((len(pc), EMBED_WIDTH))
    E[:, 0:3] = pc.positions
    E[:, 3:6] = normals
    E[:, 7] = kappa
    return E, flags | kflags


def embed_queries(queries, surface: PointCloud, curvature) -> np.ndarray:
    """Embedding of off-surface points using their nearest surface sample."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    sdf, idx = nearest_surface(q, surface)
    E = np.zeros((len(q), EMBED_WIDTH))
    E[:, 0:3] = q
    E[:, 3:6] = surface.normals[idx]
    E[:, 6] = sdf
    E[:, 7] = np.asarray(curvature)[idx]
    return E


def fibonacci_sphere(n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> PointCloud:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0**0.5) * i
    u = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return PointCloud(np.asarray(center, dtype=float) + radius * u, u)


# ---- learnable pieces ----------------------------------------------------

@dataclass(eq=False)
class KernelNet:
    """Two-layer perceptron: 3-vector offset -> C channels, tanh hidden layer."""
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng, hidden: int, channels: int, scale: float = 1.0):
        return cls(rng.normal(0, scale / np.sqrt(3), (3, hidden)), np.zeros(hidden),
                   rng.normal(0, scale / np.sqrt(hidden), (hidden, channels)), np.zeros(channels))

    @classmethod
    def constant(cls, value, channels: int, hidden: int = 1):
        """Kernel that ignores the offset and returns `value` in every channel."""
        return cls(np.zeros((3, hidden)), np.zeros(hidden), np.zeros((hidden, channels)),
                   np.full(channels, float(value)))

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def forward(self, X):
        a = np.tanh(X @ self.W1 + self.b1)
        return a @ self.W2 + self.b2, (X, a)

    def backward(self, cache, g):
        X, a = cache
        g2 = g.reshape(-1, g.shape[-1])
        A = a.reshape(-1, a.shape[-1])
        ga = (g2 @ self.W2.T) * (1.0 - A * A)
        return {"W1": X.reshape(-1, 3).T @ ga, "b1": ga.sum(0), "W2": A.T @ g2, "b2": g2.sum(0)}


@dataclass(eq=False)
class MessagePassingLayer:
    W: np.ndarray
    kernel: KernelNet

    @classmethod
    def init(cls, rng, channels: int, hidden: int = 16):
        W = rng.normal(0, 1 / np.sqrt(channels), (channels, channels))
        return cls(W, KernelNet.init(rng, hidden, channels, scale=0.5))

    def params(self):
        out = {"W": self.W}
        out.update({f"k_{n}": p for n, p in self.kernel.params().items()})
        return out


def message_pass(graph: KnnGraph, features, layer: MessagePassingLayer, return_cache=False):
    h = np.asarray(features, dtype=float)
    if h.shape != (len(graph.positions), layer.W.shape[0]):
        raise ValueError("feature width does not match layer")
    offsets = graph.positions[:, None, :] - graph.positions[graph.neighbors]
    K, kcache = layer.kernel.forward(offsets)  # (N, k, C)
    msg = (K * h[graph.neighbors]).mean(axis=1)
    out = np.tanh(h @ layer.W.T + msg)
    if return_cache:
        return out, (h, K, kcache, out)
    return out


def message_pass_backward(graph: KnnGraph, layer: MessagePassingLayer, cache, gout):
    h, K, kcache, out = cache
    ga = gout * (1.0 - out * out)
    k = graph.neighbors.shape[1]
    grads = {"W": ga.T @ h}
    gK = ga[:, None, :] * h[graph.neighbors] / k
    grads.update({f"k_{n}": g for n, g in layer.kernel.backward(kcache, gK).items()})
    gh = ga @ layer.W
    contrib = (ga[:, None, :] * K / k).reshape(-1, h.shape[1])
    np.add.at(gh, graph.neighbors.ravel(), contrib)
    return grads, gh


# ---- Nadaraya-Watson projection ------------------------------------------

@dataclass(eq=False)
class NWNeighborhood:
    inverse: np.ndarray     # source point -> unique position
    counts: np.ndarray
    first: np.ndarray       # first source index of each unique position
    neighbors: np.ndarray   # (A, k) unique indices
    weights: np.ndarray     # (A, k) normalized
    offsets: np.ndarray     # (A, k, 3) anchor minus source, latent units


def nw_neighborhood(anchors, points, k: int, eps_w: float) -> NWNeighborhood:
    """Neighbourhood and normalized weights of every anchor.

    Coincident source points are merged first, so replicated samples change
    nothing.  Weights are 1/(d+eps_w) shifted down by the value at the first
    excluded neighbour, which makes them vanish continuously at the edge of
    the neighbourhood.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("anchor neighbourhood is empty: no source points")
    uniq, first, inverse, counts = np.unique(pts, axis=0, return_index=True,
                                             return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    U = len(uniq)
    kk = min(k, U)
    take = kk + 1 if U > kk else kk
    idx, d2 = knn_query(uniq, anchors, take)
    d = np.sqrt(d2)
    w = 1.0 / (d[:, :kk] + eps_w)
    if take > kk:
        w = w - 1.0 / (d[:, kk:kk + 1] + eps_w)
    flat = w.sum(axis=1) <= 0
    if np.any(flat):
        # all k+1 candidates equidistant: share equally among the nearest ties
        w[flat] = (d[flat, :kk] == d[flat, :1]).astype(float)
    w = np.clip(w, 0.0, None)
    w = w / w.sum(axis=1, keepdims=True)
    nb = idx[:, :kk]
    offs = np.asarray(anchors)[:, None, :] - uniq[nb]
    return NWNeighborhood(inverse, counts, first, nb, w, offs)


def merge_duplicates(nbh: NWNeighborhood, features):
    f = np.asarray(features, dtype=float)
    base = f[nbh.first]
    dev = f - base[nbh.inverse]
    U, C = base.shape
    acc = np.zeros((U, C))
    np.add.at(acc, nbh.inverse, dev)
    return base + acc / nbh.counts[:, None]


@dataclass(eq=False)
class NWProjector:
    dims: tuple
    origin: np.ndarray
    spacing: np.ndarray
    kernel: KernelNet
    gain: np.ndarray
    bias: np.ndarray
    k_anchor: int = 8
    eps_w: float = 1e-6
    ln_eps: float = 1e-5

    @classmethod
    def init(cls, rng, dims, origin, spacing, channels: int, hidden: int = 16, **kw):
        return cls(tuple(int(d) for d in dims), np.asarray(origin, float), np.asarray(spacing, float),
                   KernelNet.init(rng, hidden, channels, scale=0.5),
                   np.ones(channels), np.zeros(channels), **kw)

    @property
    def anchors(self) -> np.ndarray:
        return grid_coords(self.dims, self.origin, self.spacing).reshape(-1, 3)

    def params(self):
        out = {f"k_{n}": p for n, p in self.kernel.params().items()}
        out.update({"gain": self.gain, "bias": self.bias})
        return out

    def neighborhood(self, points, anchors=None) -> NWNeighborhood:
        return nw_neighborhood(self.anchors if anchors is None else anchors, points, self.k_anchor, self.eps_w)


def _layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    return xh * gain + bias, (xh, inv)


def _layer_norm_backward(cache, gain, g):
    xh, inv = cache
    gxh = g * gain
    gx = inv * (gxh - gxh.mean(-1, keepdims=True) - xh * (gxh * xh).mean(-1, keepdims=True))
    red = tuple(range(g.ndim - 1))
    return gx, (g * xh).sum(axis=red), g.sum(axis=red)


def nw_apply(proj: NWProjector, nbh: NWNeighborhood, features, normalize=True, return_cache=False):
    """Projection onto the anchors of `nbh`; returns (A, C)."""
    hu = merge_duplicates(nbh, features)
    K, kcache = proj.kernel.forward(nbh.offsets)
    hn = hu[nbh.neighbors]
    pre = np.einsum("ak,akc->ac", nbh.weights, K * hn)
    if not normalize:
        out, lcache = pre, None
    else:
        out, lcache = _layer_norm(pre, proj.gain, proj.bias, proj.ln_eps)
    if return_cache:
        return out, (K, kcache, hn, lcache, normalize, np.asarray(features).shape)
    return out


def nw_apply_backward(proj: NWProjector, nbh: NWNeighborhood, cache, gout):
    K, kcache, hn, lcache, normalize, fshape = cache
    grads = {}
    if normalize:
        gpre, grads["gain"], grads["bias"] = _layer_norm_backward(lcache, proj.gain, gout)
    else:
        gpre = gout
        grads["gain"] = np.zeros_like(proj.gain)
        grads["bias"] = np.zeros_like(proj.bias)
    gpay = nbh.weights[:, :, None] * gpre[:, None, :]
    grads.update({f"k_{n}": g for n, g in proj.kernel.backward(kcache, gpay * hn).items()})
    ghu = np.zeros((len(nbh.counts), fshape[1]))
    np.add.at(ghu, nbh.neighbors.ravel(), (gpay * K).reshape(-1, fshape[1]))
    gfeat = (ghu / nbh.counts[:, None])[nbh.inverse]
    return grads, gfeat


def nw_project(proj: NWProjector, points, features, normalize=True) -> LatentGrid:
    nbh = proj.neighborhood(points)
    out = nw_apply(proj, nbh, features, normalize)
    return LatentGrid(out.reshape(*proj.dims, -1), proj.spacing, proj.origin)


def nw_evaluate(proj: NWProjector, queries, points, features, normalize=False):
    """Projection evaluated at arbitrary latent positions (M, 3)."""
    nbh = proj.neighborhood(points, anchors=np.atleast_2d(np.asarray(queries, dtype=float)))
    return nw_apply(proj, nbh, features, normalize)


def lipschitz_estimate(proj: NWProjector, pairs, points, features, normalize=False) -> float:
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2, 3)
    sep = np.linalg.norm(pairs[:, 0] - pairs[:, 1], axis=1)
    keep = sep > 0
    if not np.any(keep):
        return 0.0
    a = nw_evaluate(proj, pairs[keep, 0], points, features, normalize)
    b = nw_evaluate(proj, pairs[keep, 1], points, features, normalize)
    return float((np.linalg.norm(a - b, axis=1) / sep[keep]).max())


# ---- CSV -----------------------------------------------------------------

def read_point_cloud(path) -> PointCloud:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    head = [h.strip().lower() for h in rows[0]]
    if head[:3] != ["x", "y", "z"] or len(head) not in (3, 6):
        raise ValueError(f"{path}: header must be x,y,z[,nx,ny,nz]")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(head))
    normals = data[:, 3:6] if len(head) == 6 else None
    return PointCloud(data[:, :3], normals)


def write_point_cloud(path, pc: PointCloud) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if pc.normals is None:
            w.writerow(["x", "y", "z"])
            w.writerows([[repr(v) for v in r] for r in pc.positions.tolist()])
        else:
            w.writerow(["x", "y", "z", "nx", "ny", "nz"])
            data = np.hstack([pc.positions, pc.normals])
            w.writerows([[repr(v) for v in r] for r in data.tolist()])
