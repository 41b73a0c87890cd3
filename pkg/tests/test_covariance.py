import glob
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import chebyshev as C

from tricrit_rg import covariance as cv, lattice, ptmap
from tricrit_rg.lattice import ScaleContext


def _outside(s):
    X = cv.octant_coords(s.kernel.shape[0] - 1)
    r2 = sum(x.astype(np.int64) ** 2 for x in X)
    return 4 * r2 >= s.L ** (2 * s.j)


@pytest.mark.parametrize("fixture", ["dec5", "dec5_massive"])
def test_finite_range_bitwise(fixture, request):
    dec = request.getfixturevalue(fixture)
    for s in dec.slices:
        assert np.all(s.kernel[_outside(s)] == 0.0)
        assert s.kernel[0, 0, 0] > 0


def test_fejer_orders_give_exact_range():
    for L in (2, 3):
        polys = cv.slice_polynomials(L, 0.0, 5 if L == 2 else 4)
        for J, c in enumerate(polys.c, start=1):
            assert len(c) - 1 == -(-L ** J // 2) - 1


@given(st.integers(2, 40), st.floats(1.0001, 1.3), st.floats(-1, 1))
@settings(max_examples=60, deadline=None)
def test_fejer_divided_difference_identity(N, sstar, s):
    D = cv.fejer_divided_difference(N, sstar)
    F = cv.fejer_cheb(N)
    lhs = C.chebval(s, D)
    rhs = (C.chebval(sstar, F) - C.chebval(s, F)) / (sstar - s)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


@given(st.integers(2, 60), st.floats(1.0, 1.2))
@settings(max_examples=40, deadline=None)
def test_fejer_closed_form(N, s):
    assert cv.fejer_at(N, s) == pytest.approx(float(C.chebval(s, cv.fejer_cheb(N))), rel=1e-10)
    assert cv._log_fejer_at(N, s) == pytest.approx(math.log(cv.fejer_at(N, s)), rel=1e-10, abs=1e-12)


@given(st.floats(0.0, 0.5), st.floats(-1.0, 0.999))
@settings(max_examples=40, deadline=None)
def test_slice_polynomials_telescope(m2, s):
    """Σ_{J<=jmax} c_J + f Q_jmax = f pointwise in the symbol variable."""
    p = cv.slice_polynomials(2, m2, 5)
    f = 1.0 / (6.0 * (p.sstar - s))
    tot = sum(C.chebval(s, c) for c in p.c) + f * C.chebval(s, p.Q[-1])
    assert tot == pytest.approx(f, rel=1e-10)


@pytest.mark.parametrize("fixture", ["dec5", "dec5_massive"])
def test_slices_positive_semidefinite(fixture, request):
    dec = request.getfixturevalue(fixture)
    for s in dec.slices:
        sym = s.symbol()
        assert sym.min() >= -1e-13 * sym.max()


@pytest.mark.parametrize("m2", [0.0, 0.05])
def test_slice_totals_exact(m2, request):
    dec = request.getfixturevalue("dec5" if m2 == 0 else "dec5_massive")
    tot = cv.slice_totals(2, m2, 5)
    for s, t in zip(dec.slices, tot):
        assert s.full().sum() == pytest.approx(t, rel=1e-11)
    w1 = cv.w1_exact(2, m2, 5)
    assert np.allclose(w1[1:], dec.moments.w[1, 1:], rtol=1e-11)
    assert np.allclose(cv.w1_reduced(2, m2, 5), w1 * 4.0 ** -np.arange(6), rtol=1e-11)


def test_massless_totals_closed_form():
    Ns = cv.fejer_orders(2, 4)
    assert np.allclose(cv.slice_totals(2, 0.0, 4), [(N * N - 1) / 36 for N in Ns])


def test_w1_reduced_deep_is_finite():
    r = cv.w1_reduced(2, 0.01, 2000)
    assert np.all(np.isfinite(r)) and r[-1] == 0.0 or r[-1] < 1e-300


@pytest.mark.parametrize("m2", [0.0, 0.05])
def test_diagonal_sum_plus_tail(m2, request):
    dec = request.getfixturevalue("dec5" if m2 == 0 else "dec5_massive")
    assert dec.partial_sum() + dec.tail() == pytest.approx(lattice.green_function(m2), rel=1e-9)


def test_moments_consistent(dec5):
    mo = dec5.moments
    w5 = dec5.wj(5)
    mult = cv.multiplicity(w5.shape[0] - 1)
    assert (mult * w5 ** 3).sum() == pytest.approx(mo.w[3, 5], rel=1e-12)
    assert np.allclose(mo.delta_w3, np.diff(mo.w[3]))
    assert mo.c[1] == pytest.approx(dec5.slices[0].kernel[0, 0, 0])


def test_slices_independent_of_jmax(dec5):
    d4 = cv.build(ScaleContext(L=2, m2=0.0, j_max=4))
    for a, b in zip(d4.slices, dec5.slices):
        assert np.array_equal(a.kernel, b.kernel)


def test_octant_helpers():
    a = np.arange(8.0).reshape(2, 2, 2)
    full = cv.expand_octant(a)
    assert full.shape == (3, 3, 3) and full[1, 1, 1] == 0.0 and full[0, 0, 0] == a[1, 1, 1]
    assert cv.pad_octant(a, 3).shape == (4, 4, 4)
    with pytest.raises(ValueError):
        cv.pad_octant(np.ones((3, 3, 3)), 1)
    assert cv.multiplicity(2).sum() == 125


def test_cache_roundtrip_corruption_and_keying(tmp_path):
    msgs = []
    ctx = ScaleContext(L=2, m2=0.0, j_max=4)
    a = cv.build(ctx, cache_dir=str(tmp_path), log=msgs.append)
    b = cv.build(ctx, cache_dir=str(tmp_path), log=msgs.append)
    assert any("cache hit" in m for m in msgs)
    assert all(np.array_equal(x.kernel, y.kernel) for x, y in zip(a.slices, b.slices))
    path = glob.glob(os.path.join(tmp_path, "decomp_*.npz"))[0]
    with np.load(path) as z:
        arrs = {k: z[k] for k in z.files}
    arrs["kernel2"] = arrs["kernel2"] + 1e-9
    np.savez(path, **arrs)
    msgs.clear()
    c = cv.build(ctx, cache_dir=str(tmp_path), log=msgs.append)
    assert any("mismatch" in m for m in msgs)
    assert np.array_equal(c.slices[1].kernel, a.slices[1].kernel)
    assert cv.params_hash(ctx) != cv.params_hash(ScaleContext(L=3, m2=0.0, j_max=4))


def test_beta_rows_and_functionals_cache(tmp_path, dec5):
    rows = cv.direct_beta_rows(dec5, [0, 1], str(tmp_path))
    again = cv.direct_beta_rows(dec5, [1, 0], str(tmp_path))
    assert np.array_equal(rows[1][3].as_array(), again[1][3].as_array())
    fs = cv.cached_functionals(dec5, str(tmp_path))
    k1 = ptmap.kappa_table(fs[4], 1).kappa
    assert np.array_equal(k1, ptmap.kappa_table(ptmap.functionals_from_decomposition(dec5, 4), 1).kappa)


def test_lambda3_estimate(dec7, table1, cache_dir):
    dec9 = cv.build(ScaleContext(L=2, m2=0.0, j_max=9), cache_dir=cache_dir)
    rep = cv.lambda3_estimate(dec9.moments)
    assert rep.value == pytest.approx(table1["b3_33"][-1] / ptmap.b_const(1), rel=1e-10)
    # seven scales are not yet in the geometric regime
    with pytest.raises(cv.DecompositionError):
        cv.lambda3_estimate(dec7.moments)
    with pytest.raises(ValueError):
        cv.lambda3_estimate(cv.build(ScaleContext(L=2, m2=0.05, j_max=5)).moments)


def test_richardson_removes_geometric_correction():
    seq = [3.0 + 2.0 * 2.0 ** -j for j in range(6)]
    assert cv.richardson(seq, 2.0) == pytest.approx(3.0, rel=1e-14)


def test_provider_needs_enough_scales_and_reference():
    d = cv.build(ScaleContext(L=2, m2=0.0, j_max=3))
    with pytest.raises(cv.DecompositionError):
        cv.coefficient_provider(d, 1, 100)
    dm = cv.build(ScaleContext(L=2, m2=0.05, j_max=5))
    with pytest.raises(ValueError):
        cv.coefficient_provider(dm, 1, 100)


def test_splice_rejects_shallow_direct_range(dec5):
    with pytest.raises(cv.DecompositionError):
        cv.coefficient_provider(dec5, 1, 500)


def test_massless_table_resums_green_function(table1):
    L = table1.L
    s = float(np.sum(table1.rc_next * float(L) ** -np.arange(table1.depth)))
    assert s == pytest.approx(lattice.green_function(0.0), rel=1e-12)
    assert table1.splice.worst < 0.05
    assert table1.extended().sum() == table1.depth - table1.j_direct


def test_massless_table_relevant_entries(table0, table1):
    for tab in (table0, table1):
        n = tab.n
        a = tab.rc_next
        assert np.allclose(tab["b2_3"], 1.5 * (n + 4) * a, rtol=1e-12)
        assert np.allclose(tab["b1_2"], (n + 2) * a, rtol=1e-12)
        assert np.allclose(tab["b1_3"], 0.75 * (n + 4) * (n + 2) * a * a, rtol=1e-12)


def test_massive_table_decays_beyond_mass_scale(table1_massive, table1):
    jm = table1_massive.j_m
    assert jm == lattice.mass_scale(0.01, 2)
    j = np.arange(jm + 5, jm + 40)
    r = table1_massive["b3_33"][j] / table1["b3_33"][j]
    assert np.allclose(r[1:] / r[:-1], 0.5, rtol=1e-10)


def test_beta_table_csv(tmp_path, table1):
    p = tmp_path / "b.csv"
    table1.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("j,extended,Lj_c_next,chi,b3_33")
    assert len(lines) == table1.depth + 1
    assert table1.row(3).b3_33 == table1["b3_33"][3]
