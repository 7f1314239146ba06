import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geofunflow.schedule import (
    HomotopyCfg,
    Phase,
    RelaxCfg,
    c1_check,
    composite_weight,
    lambda_homotopy,
    lambda_homotopy_slope,
    lambda_phys,
    phase_of,
    schedule_table,
)

DEFAULT = HomotopyCfg()


def test_homotopy_branches():
    cfg = HomotopyCfg(0.2, 0.7, 3.0)
    assert lambda_homotopy(0.1, cfg) == 0.0
    assert lambda_homotopy(0.2, cfg) == 0.0
    assert lambda_homotopy(0.45, cfg) == 1.5
    assert lambda_homotopy(0.7, cfg) == 3.0
    assert lambda_homotopy(0.9, cfg) == 3.0
    assert lambda_homotopy(0.425, HomotopyCfg(0.3, 0.55, 2.0)) == 1.0
    assert lambda_homotopy(0.5 * (0.1 + 0.8), HomotopyCfg(0.1, 0.8, 2.0)) == 1.0
    tau = 0.33
    ref = 1.5 * (1 - math.cos(math.pi * (tau - 0.2) / 0.5))
    assert lambda_homotopy(tau, cfg) == pytest.approx(ref, rel=1e-14)


def test_config_validation():
    for bad in ((0.5, 0.5), (0.7, 0.2), (-0.1, 0.5), (0.2, 1.1)):
        with pytest.raises(ValueError):
            HomotopyCfg(*bad)
    with pytest.raises(ValueError):
        RelaxCfg(eta=1.0)
    with pytest.raises(ValueError):
        RelaxCfg(lambda_base=0.0)
    with pytest.raises(ValueError):
        lambda_homotopy(1.5)


def test_relaxation_examples():
    assert lambda_phys(0.0, RelaxCfg(2.0, 0.3)) == 2.0
    assert lambda_phys(1.0, RelaxCfg(2.0, 0.3)) == pytest.approx(0.6, rel=1e-15)
    assert lambda_phys(0.5, RelaxCfg(1.0, 0.5)) == pytest.approx(2**-0.5, rel=1e-15)


def test_phases():
    assert phase_of(0.0) is Phase.TOPOLOGY_SEARCH
    assert phase_of(DEFAULT.tau1) is Phase.QUASI_STATIC_INJECTION
    assert phase_of(DEFAULT.tau2) is Phase.QUASI_STATIC_INJECTION
    assert phase_of(1.0) is Phase.PHYSICS_LOCK_IN


def test_slope_vanishes_at_junctions():
    assert lambda_homotopy_slope(DEFAULT.tau1) == 0.0
    assert lambda_homotopy_slope(DEFAULT.tau2) == 0.0
    assert lambda_homotopy_slope(0.45) == pytest.approx(math.pi, rel=1e-14)


def test_c1_probe():
    cfg = HomotopyCfg(0.2, 0.7, 2.0)
    r = c1_check(cfg, 1e-4)
    assert r.worst <= 1e-3 * 2.0 / 0.5
    coarse, fine = c1_check(cfg, 1e-3), c1_check(cfg, 5e-4)
    assert fine.worst <= 0.5 * coarse.worst * 1.01 + 1e-10
    with pytest.raises(ValueError):
        c1_check(cfg, 0.0)


def test_table_rows():
    rows = schedule_table(10)
    assert len(rows) == 11 and rows[0][0] == 0.0 and rows[-1][0] == 1.0
    for tau, lam, lp, comp, phase in rows:
        assert comp == lam * lp and phase == phase_of(tau).value


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0),
       st.tuples(st.floats(0.0, 0.95), st.floats(0.01, 1.0)).filter(lambda p: p[0] + p[1] * (1 - p[0]) > p[0]),
       st.floats(0.01, 10.0))
def test_homotopy_monotone_and_bounded(a, b, taus, lmax):
    t1 = taus[0]
    t2 = t1 + taus[1] * (1 - t1)
    cfg = HomotopyCfg(t1, min(t2, 1.0), lmax)
    lo, hi = sorted((a, b))
    la, lb = lambda_homotopy(lo, cfg), lambda_homotopy(hi, cfg)
    assert 0.0 <= la <= lb <= lmax


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_relaxation_strictly_decreasing(a, b):
    lo, hi = sorted((a, b))
    assert 0 < lambda_phys(hi) <= lambda_phys(lo)
    if hi - lo > 1e-12:  # below this the power rounds to the same double
        assert lambda_phys(hi) < lambda_phys(lo)
    assert composite_weight(a) >= 0
