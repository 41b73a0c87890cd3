import math

import numpy as np
import pytest

from tricrit_rg import flow, lattice, observables as ob


@pytest.fixture(scope="module")
def traj(table1):
    return flow.critical_trajectory(0.02, table1, 2000)


@pytest.fixture(scope="module")
def values(dec5):
    return ob.SliceValues(dec5)


def test_lambda_starts_at_one_and_freezes(traj, table1):
    lf = ob.lambda_flow(traj, table1, j_ab=6)
    assert lf.lam[0] == 1.0
    assert np.all(lf.lam[6:] == lf.lam[6])
    assert lf.frozen == lf.lam[6]


def test_lambda_variants_agree_to_second_order(traj, table1):
    a = ob.lambda_star_infinity(traj, table1, "plus")
    b = ob.lambda_star_infinity(traj, table1, "next")
    assert abs(1 - a) < 1e-4 and abs(1 - b) < 1e-4
    with pytest.raises(ValueError):
        ob.delta_nu_w1(traj, table1, "other")


def test_slice_values_finite_range(values, dec5):
    for j in range(1, 6):
        for x in [(0, 0, 0), (1, 0, 0), (3, 2, 1), (7, 1, 0), (15, 0, 0)]:
            if not values.in_range(j, x):
                assert values(j, x) == 0.0
    assert values(0, (0, 0, 0)) == 0.0


def test_slice_values_scale_beyond_last(values):
    J, L = values.J, values.L
    for x in [(0, 0, 0), (1, 0, 0), (2, 1, 1), (3, 3, 0)]:
        y = tuple(L * c for c in x)
        assert values(J + 1, y) == pytest.approx(values(J, x) / L, rel=1e-14)


@pytest.mark.parametrize("x", [(4, 0, 0), (9, 2, 0), (20, 0, 0)])
def test_q_telescopes_to_w(values, x):
    a, b = (0, 0, 0), x
    q = ob.q_flow(1.0, 1.0, a, b, values, depth=7)
    assert q.q[-1] == pytest.approx(ob.w_ab(values, a, b, 7), rel=1e-14, abs=1e-300)
    jab = lattice.coalescence_scale(a, b, values.L)
    assert np.all(q.q[:jab + 1] == 0.0)


def test_q_inf_is_product_times_green(values):
    q = ob.q_flow(0.5, 0.8, (0, 0, 0), (5, 0, 0), values, depth=3)
    assert q.q_inf == pytest.approx(0.4 * lattice.green_function(0.0, (5, 0, 0)))


def test_two_point_amplitude_reference(traj, table1):
    rep = ob.two_point(traj, table1, (0, 0, 0), (64, 0, 0), z0_star=0.0)
    assert rep.reference == 1 / (4 * math.pi)
    assert rep.amplitude == pytest.approx(rep.reference, rel=0.01)
    assert rep.G == pytest.approx(rep.q_inf)


def test_susceptibility(traj, table1, table1_massive):
    assert ob.susceptibility(traj, table1) == math.inf
    tm = flow.critical_trajectory(0.02, table1_massive, 2000)
    assert ob.susceptibility(tm, table1_massive, z0_star=0.0) == pytest.approx(1 / table1_massive.m2)


def test_csv(traj, table1, tmp_path):
    reps = [ob.two_point(traj, table1, (0, 0, 0), (r, 0, 0)) for r in (8, 16)]
    ob.write_two_point_csv(reps, tmp_path / "g.csv", C=0.5)
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0].startswith("r,q_inf,amplitude")
    lo, hi = map(float, rows[1].split(",")[3:5])
    assert lo < 1 / (4 * math.pi) < hi
