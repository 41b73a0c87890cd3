import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tricrit_rg import lattice, polymer_mc as pm
from tricrit_rg.tricrit import StarTuple


@given(seed=st.integers(0, 10 ** 6), T=st.floats(0.1, 20.0), side=st.integers(2, 6))
@settings(max_examples=30, deadline=None)
def test_local_times_sum_to_horizon(seed, T, side):
    s = pm.simulate(side, T, seed=seed)
    assert s.local_times.sum() == pytest.approx(T, rel=1e-12)
    assert np.all(s.local_times >= 0)
    assert s.local_times.shape == (side,) * 3
    assert np.array_equal(s.endpoint, s.sites[-1])


def test_jump_count_has_rate_six():
    k = [pm.simulate(4, 5.0, seed=i).n_jumps for i in range(2000)]
    assert abs(np.mean(k) - 30.0) < 3 * math.sqrt(30.0 / 2000)


@given(seed=st.integers(0, 10 ** 6), scale=st.floats(0.2, 5.0))
@settings(max_examples=20, deadline=None)
def test_batch_local_times_sum(seed, scale):
    T = scale * np.random.default_rng(seed).random(50)
    end, lt, K = pm._batch_paths(3, T, np.random.default_rng(seed))
    assert np.allclose(lt.sum(axis=1), T, rtol=1e-12)
    assert lt.shape == (50, 27) and np.all((0 <= end) & (end < 27))


def test_weight_bounded_by_one():
    lt = np.random.default_rng(0).random((100, 27)) * 3
    w = pm._weight(lt, 0.1, 0.2)
    assert np.all((w > 0) & (w <= 1))


def test_estimate_is_bitwise_deterministic():
    a = pm.estimate_c(3, 0.1, -0.05, 1.0, (1, 0, 0), samples=3000, seed=7)
    b = pm.estimate_c(3, 0.1, -0.05, 1.0, (1, 0, 0), samples=3000, seed=7)
    assert a.mean == b.mean and a.stderr == b.stderr
    assert '"seed": 7' in a.to_json()


@pytest.mark.parametrize("x", [(0, 0, 0), (1, 0, 0), (1, 1, 0)])
def test_free_walk_reproduces_torus_resolvent(x):
    e = pm.estimate_c(4, 0.0, 0.0, 1.0, x, samples=40_000, seed=11)
    exact = lattice.torus_resolvent(4, 1.0, x)
    assert abs(e.mean - exact) < 4 * e.stderr


def test_interaction_lowers_the_two_point_function():
    free = pm.estimate_c(4, 0.0, 0.0, 1.0, (0, 0, 0), samples=20_000, seed=2)
    inter = pm.estimate_c(4, 0.5, 0.0, 1.0, (0, 0, 0), samples=20_000, seed=2)
    assert inter.mean < free.mean


def test_argument_errors():
    with pytest.raises(ValueError):
        pm.estimate_c(4, 0.0, 0.0, 0.0, (0, 0, 0), samples=10)
    with pytest.raises(ValueError):
        pm.estimate_c(4, -0.1, 0.0, 1.0, (0, 0, 0), samples=10)
    with pytest.raises(ValueError):
        pm.estimate_c(4, 0.0, -0.1, 1.0, (0, 0, 0), samples=10)
    with pytest.raises(ValueError):
        pm.estimate_c(4, 0.1, 0.0, 1.0, (0, 0, 0), samples=10, method="other")
    with pytest.raises(ValueError):
        pm.simulate(1, 1.0)


def test_envelope_dominates_weight():
    T = np.linspace(0.1, 30, 50)
    assert np.all(pm.envelope(T, 0.1, -0.2, 1.0, 64) >= np.exp(-T))


def test_grid_tail_and_required_horizon():
    Tm = pm.required_T_max(0.1, 0.0, 1.0, 64, 1e-6)
    assert pm.tail_bound(Tm, 0.1, 0.0, 1.0, 64) < 1e-6
    assert pm.tail_bound(Tm / 1.5, 0.1, 0.0, 1.0, 64) >= 1e-6 or Tm == 1.0
    with pytest.raises(pm.PolymerError):
        pm.estimate_c(4, 0.1, 0.0, 1.0, (0, 0, 0), samples=2, method="grid", T_grid=(1e-4, 2.0, 16))


def test_grid_estimator_free_case():
    e = pm.estimate_c(3, 0.0, 0.0, 2.0, (0, 0, 0), samples=2000, seed=5, method="grid", tol=1e-5)
    exact = lattice.torus_resolvent(3, 2.0, (0, 0, 0))
    assert abs(e.mean - exact) < 4 * e.stderr + 1e-3
    assert e.params["tail_bound"] < 1e-5


def test_theta_probe_needs_positive_mass():
    st0 = StarTuple(0.0, 0.01, 0.01, -0.01, 0.02, 0.0, -0.01, 0.02, 0.0)
    with pytest.raises(ValueError):
        pm.theta_probe(4, 0.01, st0)


def test_theta_probe_runs():
    st1 = StarTuple(0.5, 0.01, 0.01, -0.001, 0.0, 0.0, -0.001, 0.5, 0.0)
    rep = pm.theta_probe(4, 0.01, st1, samples=4000, radii=(0, 1))
    assert len(rep.rows) == 2
    assert all(abs(r[4] - 1) < 0.2 for r in rep.rows)
