from fractions import Fraction

import numpy as np
import pytest

from geofunflow.latent_grid import LatentGrid
from geofunflow.noad import (
    DiffPlan,
    apply_derivative,
    axis_matrix,
    central4,
    convergence_sweep,
    derive_stencil,
    diff_axis,
    diff_axis_adjoint,
    laplacian,
    laplacian_adjoint,
    ntk_growth_compare,
    one_sided5,
    symbol_bound_check,
    symbol_central4,
)


def test_central_coefficients():
    st = central4()
    assert st.offsets == (-2, -1, 0, 1, 2)
    assert st.weights == tuple(Fraction(c, 12) for c in (1, -8, 0, 8, -1))
    assert sum(st.weights) == 0
    assert all(a == -b for a, b in zip(st.weights, reversed(st.weights)))
    assert st.truncation_order == 4


def test_one_sided_coefficients():
    left, right = one_sided5("left"), one_sided5("right")
    assert left.weights == tuple(Fraction(c, 12) for c in (-25, 48, -36, 16, -3))
    assert right.offsets == (-4, -3, -2, -1, 0)
    assert right.weights == tuple(-w for w in reversed(left.weights))
    assert sum(left.weights) == 0 and left.truncation_order == 4
    with pytest.raises(ValueError):
        one_sided5("up")


def test_derive_stencil_examples():
    assert derive_stencil([-1, 0, 1]).weights == (Fraction(-1, 2), 0, Fraction(1, 2))
    assert derive_stencil([-1, 0, 1]).truncation_order == 2
    with pytest.raises(ValueError):
        derive_stencil([0, 0, 1])
    with pytest.raises(ValueError):
        derive_stencil([0], 1)


@pytest.mark.parametrize("offsets", [[-2, -1, 0, 1, 2], [0, 1, 2, 3, 4], [-1, 0, 1, 2, 3], [-4, -3, -2, -1, 0]])
def test_monomial_exactness(offsets):
    st = derive_stencil(offsets)
    for deg in range(st.design_degree + 1):
        # d/dx x^deg at x = 0.7 with unit spacing
        x0 = 0.7
        vals = [(x0 + o) ** deg for o in offsets]
        exact = deg * x0 ** (deg - 1) if deg else 0.0
        assert abs(st.evaluate(vals, 1.0) - exact) <= 1e-10


def test_boundary_quartic_is_exact():
    x = np.linspace(0.0, 1.0, 11)
    h = x[1] - x[0]
    d = diff_axis(x**4, 0, h)
    assert np.allclose(d, 4 * x**3, rtol=0, atol=1e-12)


def test_constant_and_ramp():
    f = np.full((6, 7, 8), 3.25)
    for a in range(3):
        assert np.all(diff_axis(f, a, 0.1) == 0.0)
    x = np.linspace(-1, 1, 9)
    d = diff_axis(2.5 * x - 1.0, 0, x[1] - x[0])
    assert np.allclose(d, 2.5, rtol=0, atol=1e-12)


def test_adding_constant_leaves_derivative_unchanged():
    rng = np.random.default_rng(0)
    # dyadic samples keep f + c exact, so the comparison can be bitwise
    f = rng.integers(-1000, 1000, size=(7, 6, 5)) / 64.0
    for a in range(3):
        assert np.array_equal(diff_axis(f, a, 0.3), diff_axis(f + 0.5, a, 0.3))


def test_sine_error_ratio_under_halving():
    errs = []
    for n in (64, 127):
        x = np.linspace(0.0, 2 * np.pi, n)
        errs.append(np.abs(diff_axis(np.sin(x), 0, x[1] - x[0]) - np.cos(x)).max())
    assert 14.0 <= errs[0] / errs[1] <= 18.0


def test_observed_orders():
    rows = convergence_sweep()
    assert np.all((rows[1:, 3] >= 3.8) & (rows[1:, 3] <= 4.2))
    assert np.all((rows[1:, 4] >= 3.8) & (rows[1:, 4] <= 4.2))


def test_short_axis_rejected():
    with pytest.raises(ValueError):
        diff_axis(np.zeros(4), 0, 1.0)
    with pytest.raises(ValueError):
        DiffPlan(3, 1.0)


def test_apply_derivative_channelwise():
    x = np.linspace(-1, 1, 6)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    g = LatentGrid(np.stack([X, 2 * Y], -1), np.full(3, x[1] - x[0]), np.full(3, -1.0))
    d = apply_derivative(g, DiffPlan(0, x[1] - x[0]))
    assert np.allclose(d.values[..., 0], 1.0) and np.allclose(d.values[..., 1], 0.0)


def test_adjoint_identity():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(6, 7, 8))
    g = rng.normal(size=(6, 7, 8))
    for a in range(3):
        lhs = np.vdot(diff_axis(f, a, 0.2), g)
        rhs = np.vdot(f, diff_axis_adjoint(g, a, 0.2))
        assert lhs == pytest.approx(rhs, rel=1e-12)
    sp = (0.2, 0.3, 0.25)
    assert np.vdot(laplacian(f, sp), g) == pytest.approx(np.vdot(f, laplacian_adjoint(g, sp)), rel=1e-12)


def test_matrix_matches_gather():
    rng = np.random.default_rng(5)
    f = rng.normal(size=9)
    assert np.allclose(axis_matrix(9, 0.4) @ f, diff_axis(f, 0, 0.4), rtol=0, atol=1e-13)


def test_symbol_examples():
    assert symbol_central4(0.0, 0.1) == 0
    assert abs(symbol_central4(np.pi / 0.1, 0.1)) < 1e-12
    w = 1e-3 / 0.1
    assert abs(symbol_central4(w, 0.1) / (1j * w) - 1) <= 1e-5
    with pytest.raises(ValueError):
        symbol_central4(1.0, 0.0)


@pytest.mark.parametrize("h", [1.0, 0.1, 0.01])
def test_symbol_bound(h):
    chk = symbol_bound_check(h)
    assert chk.bound == 1.5 / h
    assert chk.passed and chk.max_times_h < 1.5
    xs = np.linspace(0, np.pi, 200001)
    assert chk.max_times_h == pytest.approx(((8 * np.sin(xs) - np.sin(2 * xs)) / 6).max(), rel=1e-6)


def test_ntk_growth():
    h = 0.1
    w = np.linspace(0, np.pi / h, 101)
    for k in (1, 2, 3):
        tab = ntk_growth_compare(w, k, h)
        assert np.all(tab[:, 2] <= (1.5 / h) ** (2 * k))
        assert tab[-1, 2] < 1e-20
    lo = ntk_growth_compare([1e-3 / h], 1, h)[0]
    assert lo[2] == pytest.approx(lo[1], rel=0.01)
    with pytest.raises(ValueError):
        ntk_growth_compare(w, 0, h)
