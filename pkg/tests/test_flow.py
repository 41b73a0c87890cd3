import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tricrit_rg import flow, ptmap


@pytest.fixture(scope="module")
def traj(table1):
    return flow.critical_trajectory(0.02, table1, 2000)


def test_a_flow_is_monotone_and_positive(table1):
    mu = flow.a_flow(0.02, table1, 2000)
    assert mu[0] == 0.02
    assert np.all(np.diff(mu) < 0) and np.all(mu > 0)


@pytest.mark.parametrize("a0", [0.0, -0.01, 0.05, 0.3])
def test_a_flow_rejects_out_of_domain(a0, table1):
    with pytest.raises(flow.FlowError):
        flow.a_flow(a0, table1, 10)


def test_a_flow_depth_limited_by_table(table1):
    with pytest.raises(ValueError):
        flow.a_flow(0.01, table1, table1.depth + 1)


def test_zero_final_conditions(traj):
    assert traj.mu2[-1] == 0.0 and traj.mu1[-1] == 0.0
    assert traj.remainder == "zero"
    assert set(traj.tails) == {"mu2", "mu1", "muDelta"}


def test_backward_solution_satisfies_forward_recursion(traj, table1):
    mu0 = [traj.mu1[0], traj.mu2[0], traj.mu3[0], traj.muD[0]]
    fw = flow.forward_flow(mu0, table1, 12)
    ref = np.column_stack([traj.mu1, traj.mu2, traj.mu3, traj.muD])[:13]
    assert np.allclose(fw[:, 2:], ref[:, 2:], rtol=1e-13, atol=0)
    # relevant directions amplify roundoff by L and L² per step
    assert np.allclose(fw[:, :2], ref[:, :2], rtol=1e-6, atol=1e-12)


def test_mu2_recursion_residual_everywhere(traj, table1):
    L, p = table1.L, ptmap.p2(table1.n)
    D = traj.depth
    b3, b23, b233 = (table1[k][:D] for k in ("b3_33", "b2_3", "b2_33"))
    m3, m2 = traj.mu3[:D], traj.mu2[:D]
    nxt = L * (m2 * (1 - p * b3 * m3) + b23 * m3 - b233 * m3 ** 2)
    assert np.allclose(nxt, traj.mu2[1:], rtol=1e-10, atol=1e-16)


def test_pi_product_matches_direct_product(traj, table1):
    p = ptmap.p2(table1.n)
    f = 1 - p * table1["b3_33"][:50] * traj.mu3[:50]
    assert flow.pi_product(traj.mu3, table1, 3, 40) == pytest.approx(np.prod(f[3:41]), rel=1e-12)
    assert flow.pi_product(traj.mu3, table1, 5, 5) == pytest.approx(f[5])


def test_critical_couplings_signs(traj):
    assert traj.g0 < 0 < traj.nu0
    assert abs(traj.z0) < 1e-3


def test_tune_matches_trajectory(traj, table1):
    assert flow.tune(0.02, table1, 2000) == (traj.g0, traj.nu0, traj.z0)


def test_stub_remainder_is_deterministic_and_cubic():
    r1, r2 = flow.StubRemainder(seed=3), flow.StubRemainder(seed=3)
    assert np.array_equal(r1(4, 0.01, 1.0), r2(4, 0.01, 1.0))
    assert np.allclose(r1(4, 0.02, 1.0), 8 * r1(4, 0.01, 1.0))
    assert np.all(np.abs(r1(7, 0.01, 0.5)) <= 0.5e-6)


def test_stub_keeps_trajectory_close(table1):
    a = flow.critical_trajectory(0.01, table1, 400)
    b = flow.critical_trajectory(0.01, table1, 400, remainder="stub")
    assert b.remainder == "stub"
    assert abs(a.g0 - b.g0) < 0.05 * abs(a.g0)


def test_unknown_remainder_policy(table1):
    with pytest.raises(ValueError):
        flow.critical_trajectory(0.01, table1, 50, remainder="cubic")


@given(a0=st.floats(1e-3, 0.04))
@settings(max_examples=10, deadline=None)
def test_g0_is_linear_to_leading_order(a0, table1):
    g, nu, z = flow.tune(a0, table1, 300)
    g2, _, _ = flow.tune(a0 / 2, table1, 300)
    assert g / g2 == pytest.approx(2.0, rel=0.2)


def test_massive_a_flow_freezes(table1_massive):
    mu = flow.a_flow(0.02, table1_massive, 2000)
    assert abs(mu[-1] - mu[-100]) < 1e-6 * mu[-1]


def test_csv(traj, tmp_path):
    p = tmp_path / "t.csv"
    traj.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "j,mu3,mu2,mu1,muDelta,chi_j"
    assert len(lines) == traj.depth + 2
    rows = [(0.01, 0.02, g, 0.0, 0.0) for g in (-0.1, -0.2)]
    flow.write_tuning_csv(rows, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("m2,a0,g0c,nu0c,z0c")
