import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tricrit_rg import flow, tricrit


def _z(a0):
    return 0.1 * a0


def _tune(a0):
    return -a0, 0.5 * a0, 0.1 * a0


@given(a=st.floats(1e-4, 0.02))
@settings(max_examples=30, deadline=None)
def test_star_with_fixture_maps(a):
    s = tricrit.solve_star(a, None, z0_func=_z, tune_func=_tune)
    assert np.abs(s.constraints()).max() < 1e-12
    assert s.a0_star / (1 + 0.1 * s.a0_star) ** 3 == pytest.approx(a, rel=1e-12)
    assert s.m2 == 0.0


def test_star_on_real_flow(table1):
    s = tricrit.solve_star(0.01, table1, 2000)
    assert np.abs(s.constraints()).max() < 1e-12
    assert s.a0_star == pytest.approx(0.01 * (1 + s.z0_star) ** 3, rel=1e-12)
    g, nu = tricrit.tricritical_point(0.01, table1, 2000)
    assert (g, nu) == (s.g_star, s.nu_star)


@pytest.mark.parametrize("a", [0.0, -1e-3, tricrit.DELTA1_CONFIG])
def test_star_rejects_a_outside_domain(a, table1):
    with pytest.raises(tricrit.StarError):
        tricrit.solve_star(a, table1)


def test_tricritical_point_requires_massless(table1_massive):
    with pytest.raises(ValueError):
        tricrit.tricritical_point(0.01, table1_massive)


def test_tricritical_curve(table1, table1_massive):
    rows = tricrit.tricritical_curve(0.01, {0.0: table1, 0.01: table1_massive}, 2000)
    assert [r[0] for r in rows] == [0.0, 0.01]


def test_richardson_removes_polynomial_corrections():
    x = 0.1 * 0.5 ** np.arange(6)
    y = 2.5 - 3.0 * x + 7.0 * x ** 2
    assert np.allclose(tricrit.richardson_geometric(x, y, 2), 2.5, atol=1e-12)
    y1 = 2.5 - 3.0 * x
    assert np.allclose(tricrit.richardson_geometric(x[::-1], y1[::-1], 1), 2.5, atol=1e-13)


def test_slopes_grid_validation(table1):
    with pytest.raises(ValueError):
        tricrit.asymptotic_slopes([0.01, 0.005, 0.0025], table1)
    with pytest.raises(ValueError):
        tricrit.asymptotic_slopes([0.01, 0.008, 0.005, 0.003, 0.001], table1)
    with pytest.raises(ValueError):
        tricrit.asymptotic_slopes(0.02 * 0.5 ** np.arange(5), table1, kind="other")


def test_slopes_approach_targets(table1, table0):
    grid = 0.02 * 0.5 ** np.arange(6)
    for tab in (table0, table1):
        rep = tricrit.asymptotic_slopes(grid, tab, depth=2000)
        assert rep.g_rel_error < 1e-4 and rep.nu_rel_error < 1e-4
        assert rep.target_g < 0 < rep.target_nu
