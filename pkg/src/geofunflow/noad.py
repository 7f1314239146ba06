"""Explicit finite-difference derivatives on latent grids.

Interior nodes use the five-point fourth-order central stencil.  The two
outermost layers on each side switch to five-point one-sided stencils so no
ghost values are needed.  Stencil weights come from an exact rational solve of
the moment (Vandermonde) system.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial

import numpy as np

from .latent_grid import AffineMap, LatentGrid

MIN_EXTENT = 5


@dataclass(frozen=True)
class Stencil:
    offsets: tuple
    weights: tuple  # exact rationals, scaled by 1/h**derivative_order at evaluation
    derivative_order: int
    truncation_order: int

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([float(w) for w in self.weights])

    @property
    def design_degree(self) -> int:
        return self.truncation_order + self.derivative_order - 1

    def evaluate(self, samples, h: float) -> float:
        """Apply to function values taken at the stencil offsets."""
        samples = np.asarray(samples, dtype=float)
        return float(self.coeffs @ samples) / h**self.derivative_order


def _solve_exact(A, b):
    n = len(A)
    M = [row[:] + [rhs] for row, rhs in zip(A, b)]
    for col in range(n):
        piv = next((r for r in range(col, n) if M[r][col] != 0), None)
        if piv is None:
            raise ValueError("singular stencil system (repeated offsets?)")
        M[col], M[piv] = M[piv], M[col]
        p = M[col][col]
        M[col] = [v / p for v in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0:
                fac = M[r][col]
                M[r] = [a - fac * c for a, c in zip(M[r], M[col])]
    return [M[r][n] for r in range(n)]


def derive_stencil(offsets, derivative_order: int = 1) -> Stencil:
    offs = [int(o) for o in offsets]
    if derivative_order < 1:
        raise ValueError("derivative order must be >= 1")
    if len(set(offs)) != len(offs):
        raise ValueError("singular stencil system: repeated offsets")
    n = len(offs)
    if n <= derivative_order:
        raise ValueError("need more offsets than the derivative order")
    # sum_k w_k o_k^m / m! = [m == order] for m = 0..n-1
    A = [[Fraction(o) ** m / factorial(m) for o in offs] for m in range(n)]
    b = [Fraction(int(m == derivative_order)) for m in range(n)]
    w = _solve_exact(A, b)
    m = n
    while sum(wk * Fraction(o) ** m for wk, o in zip(w, offs)) == 0:
        m += 1
    return Stencil(tuple(offs), tuple(w), derivative_order, m - derivative_order)


def central4() -> Stencil:
    return derive_stencil([-2, -1, 0, 1, 2])


def one_sided5(side: str = "left") -> Stencil:
    if side == "left":
        return derive_stencil([0, 1, 2, 3, 4])
    if side == "right":
        return derive_stencil([-4, -3, -2, -1, 0])
    raise ValueError("side must be 'left' or 'right'")


# offsets used by each node layer: 0, 1 (shifted), interior, n-2 (shifted), n-1
_LAYER_OFFSETS = ([0, 1, 2, 3, 4], [-1, 0, 1, 2, 3], [-2, -1, 0, 1, 2], [-3, -2, -1, 0, 1], [-4, -3, -2, -1, 0])


@lru_cache(maxsize=None)
def _layer_stencils():
    return tuple(derive_stencil(o) for o in _LAYER_OFFSETS)


@dataclass(frozen=True)
class DiffPlan:
    axis: int
    spacing: float

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")


def diff_axis(f, axis: int, h: float) -> np.ndarray:
    """First derivative along a grid axis with boundary stencil switching.

    Weights act on differences f[i+o] - f[i], so constant fields give exact zeros.
    """
    f = np.asarray(f, dtype=float)
    n = f.shape[axis]
    if n < MIN_EXTENT:
        raise ValueError(f"axis extent {n} < {MIN_EXTENT}")
    g = np.moveaxis(f, axis, 0)
    out = np.empty_like(g)
    left, left1, mid, right1, right = _layer_stencils()
    # interior: 8 (f[i+1] - f[i-1]) - (f[i+2] - f[i-2]), over 12 h
    out[2:n - 2] = (8.0 * (g[3:n - 1] - g[1:n - 3]) - (g[4:n] - g[0:n - 4])) / (12.0 * h)
    for i, st in ((0, left), (1, left1), (n - 2, right1), (n - 1, right)):
        acc = np.zeros_like(g[i])
        for o, w in zip(st.offsets, st.coeffs):
            if o != 0:
                acc += w * (g[i + o] - g[i])
        out[i] = acc / h
    return np.moveaxis(out, 0, axis)


@lru_cache(maxsize=64)
def _axis_matrix(n: int, h: float) -> np.ndarray:
    D = np.zeros((n, n))
    left, left1, mid, right1, right = _layer_stencils()
    for i in range(n):
        st = left if i == 0 else left1 if i == 1 else right if i == n - 1 else right1 if i == n - 2 else mid
        for o, w in zip(st.offsets, st.coeffs):
            D[i, i + o] += w / h
    D.setflags(write=False)
    return D


def axis_matrix(n: int, h: float) -> np.ndarray:
    """Dense first-derivative operator matching diff_axis."""
    if n < MIN_EXTENT:
        raise ValueError(f"axis extent {n} < {MIN_EXTENT}")
    return _axis_matrix(int(n), float(h))


def diff_axis_adjoint(g, axis: int, h: float) -> np.ndarray:
    """Transpose of diff_axis, used for reverse-mode accumulation."""
    g = np.asarray(g, dtype=float)
    D = axis_matrix(g.shape[axis], h)
    moved = np.moveaxis(g, axis, 0)
    out = np.tensordot(D.T, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def apply_derivative(grid: LatentGrid, plan: DiffPlan) -> LatentGrid:
    return grid.with_values(diff_axis(grid.values, plan.axis, plan.spacing))


def gradient(f, spacing) -> np.ndarray:
    """Latent gradient of a field shaped (H, W, D, ...); components on a new last axis."""
    return np.stack([diff_axis(f, a, spacing[a]) for a in range(3)], axis=-1)


def gradient_adjoint(g, spacing) -> np.ndarray:
    return sum(diff_axis_adjoint(g[..., a], a, spacing[a]) for a in range(3))


def physical_gradient(f, spacing, amap: AffineMap) -> np.ndarray:
    return gradient(f, spacing) / amap.scale


def physical_gradient_adjoint(g, spacing, amap: AffineMap) -> np.ndarray:
    return gradient_adjoint(g / amap.scale, spacing)


def second_derivative(f, axis_a: int, axis_b: int, spacing) -> np.ndarray:
    """Second (or mixed) derivative as two first-derivative passes."""
    return diff_axis(diff_axis(f, axis_a, spacing[axis_a]), axis_b, spacing[axis_b])


def laplacian(f, spacing) -> np.ndarray:
    return sum(second_derivative(f, a, a, spacing) for a in range(3))


def laplacian_adjoint(g, spacing) -> np.ndarray:
    out = 0.0
    for a in range(3):
        out = out + diff_axis_adjoint(diff_axis_adjoint(g, a, spacing[a]), a, spacing[a])
    return out


# ---- frequency response --------------------------------------------------

def symbol_central4(omega, h: float):
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(omega, dtype=float) * h
    return 1j * (8.0 * np.sin(x) - np.sin(2.0 * x)) / (6.0 * h)


@dataclass(frozen=True)
class BoundCheck:
    max_symbol: float
    bound: float
    max_times_h: float
    passed: bool


def symbol_bound_check(h: float, samples: int = 20001) -> BoundCheck:
    if samples < 10_000:
        raise ValueError("dense scan needs at least 1e4 samples")
    omega = np.linspace(0.0, np.pi, samples) / h
    mag = np.abs(symbol_central4(omega, h))
    m = float(mag.max())
    bound = 3.0 / (2.0 * h)
    return BoundCheck(m, bound, m * h, m <= bound)


def ntk_growth_compare(omegas, k: int, h: float):
    """Rows (omega, AD growth omega^2k, discrete growth |symbol|^2k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    w = np.asarray(omegas, dtype=float)
    ad = np.abs(w) ** (2 * k)
    disc = np.abs(symbol_central4(w, h)) ** (2 * k)
    return np.column_stack([w, ad, disc])


def convergence_sweep(nodes=(33, 65, 129)):
    """Max errors of d/dx sin on [0, 2pi], split into interior and boundary layers.

    Rows: h, err_interior, err_boundary, order_interior, order_boundary (orders
    are NaN on the first row).
    """
    rows = []
    for n in nodes:
        x = np.linspace(0.0, 2.0 * np.pi, n)
        h = x[1] - x[0]
        err = np.abs(diff_axis(np.sin(x), 0, h) - np.cos(x))
        rows.append([h, err[2:n - 2].max(), max(err[:2].max(), err[n - 2:].max())])
    out = []
    for i, (h, ei, eb) in enumerate(rows):
        if i == 0:
            oi = ob = float("nan")
        else:
            oi = np.log2(rows[i - 1][1] / ei)
            ob = np.log2(rows[i - 1][2] / eb)
        out.append([h, ei, eb, oi, ob])
    return np.array(out)
