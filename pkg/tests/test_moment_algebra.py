import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from tricrit_rg import acceptance
from tricrit_rg import moment_algebra as ma

cov = st.floats(0.01, 2.0)
cd_frac = st.floats(0.01, 0.95)   # cΔ = -6·frac·c keeps the two-site covariance positive


@given(cov, cd_frac, st.sampled_from([1, 2, 3]))
@settings(max_examples=25, deadline=None)
def test_wick_matrix_matches_quadrature(c, frac, n):
    cd = -6.0 * frac * c
    A = ma.wick_matrix(c, cd, n)
    B = acceptance.gh_wick_matrix(c, cd, n)
    assert np.allclose(A, B, rtol=1e-9, atol=1e-12 * np.abs(B).max())


def test_wick_matrix_n0_by_interpolation():
    A = ma.wick_matrix(0.3, -0.4, 0)
    B = acceptance.gh_wick_matrix_any_n(0.3, -0.4, 0)
    assert np.allclose(A, B, atol=1e-10)
    # n = 0: the constant row vanishes identically
    assert np.all(A[0, 1:] == 0)


@given(cov, cov, st.floats(-1, 0), st.floats(-1, 0), st.integers(0, 5))
@settings(max_examples=50, deadline=None)
def test_wick_semigroup(c1, c2, d1, d2, n):
    lhs = ma.wick_matrix(c1, d1, n) @ ma.wick_matrix(c2, d2, n)
    assert np.allclose(lhs, ma.wick_matrix(c1 + c2, d1 + d2, n), rtol=1e-12, atol=1e-14)


def test_wick_matrix_structure():
    M = ma.wick_matrix(0.2, -0.3, 1)
    assert np.allclose(M, np.triu(M))
    assert np.allclose(np.diag(M), 1.0)
    assert np.array_equal(ma.wick_matrix(0.0, 0.0, 2), np.eye(6))
    assert M[2, 3] == pytest.approx(1.5 * 5 * 0.2)
    assert M[1, 2] == pytest.approx(3 * 0.2)


def test_wick_apply_linear():
    U = np.array([0, 0.1, -0.2, 0.05, 0.0, 0.01])
    assert np.allclose(ma.wick_apply(0.1, -0.2, 1, U), ma.wick_matrix(0.1, -0.2, 1) @ U)


# invariant calculus against brute-force component derivatives ------------------

def _to_components(poly, x, y):
    A = sum(v * v for v in x)
    B = sum(v * v for v in y)
    X = sum(a * b for a, b in zip(x, y))
    return sp.expand(sum(c * A ** a * B ** b * X ** g for (a, b, g), c in poly.items()))


polys = st.dictionaries(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2)),
                        st.integers(-3, 3), min_size=1, max_size=4)


@given(polys, st.sampled_from([1, 2, 3]))
@settings(max_examples=30, deadline=None)
def test_dop_is_cross_contraction(poly, n):
    x = sp.symbols(f"x0:{n}")
    y = sp.symbols(f"y0:{n}")
    f = _to_components(poly, x, y)
    direct = sp.expand(sum(sp.diff(f, xi, yi) for xi, yi in zip(x, y)))
    assert sp.expand(_to_components(ma.dop(poly, n), x, y) - direct) == 0


@given(polys, st.sampled_from([1, 2, 3]))
@settings(max_examples=30, deadline=None)
def test_lap_x_is_site_laplacian(poly, n):
    x = sp.symbols(f"x0:{n}")
    y = sp.symbols(f"y0:{n}")
    f = _to_components(poly, x, y)
    direct = sp.expand(sum(sp.diff(f, xi, 2) for xi in x))
    assert sp.expand(_to_components(ma.lap_x(poly, n), x, y) - direct) == 0
    direct_y = sp.expand(sum(sp.diff(f, yi, 2) for yi in y))
    assert sp.expand(_to_components(ma.lap_y(poly, n), x, y) - direct_y) == 0


@pytest.mark.parametrize("q", [1, 2, 3])
@pytest.mark.parametrize("n", [0, 1, 2, 5])
def test_single_site_laplacian_power(q, n):
    out = ma.lap_x(ma.tau_power(q, "x"), n)
    expect = ma.pscale(ma.tau_power(q - 1, "x"), ma.single_site_laplacian_power(q, n))
    assert {k: float(v) for k, v in out.items()} == pytest.approx({k: float(v) for k, v in expect.items()})


def test_contraction_table_symmetry_and_values():
    tab = ma.contraction_coefficients()
    assert tab.at_n1(1, 1, 1) == 4          # Dop(A B) = 4X
    for p, q, k in [(1, 2, 1), (2, 3, 2), (1, 3, 2)]:
        a = sum(tab.poly(p, q, k).values(), sp.Integer(0))
        b = sum(tab.poly(q, p, k).values(), sp.Integer(0))
        assert sp.expand(a - b) == 0
    assert "monomial" in tab.to_json()


def test_contraction_terms_numeric_matches_exact():
    P, Q = ma.tau_power(2, "x"), ma.tau_power(1, "y")
    ex = ma.contraction_terms(P, Q, 1)
    fl = ma.contraction_terms({k: float(v) for k, v in P.items()}, {k: float(v) for k, v in Q.items()}, 1.0)
    for k in ex:
        assert {m: float(v) for m, v in ex[k].items()} == pytest.approx(fl[k])


# Loc ---------------------------------------------------------------------------

def test_loc_rejects_first_moment():
    with pytest.raises(ma.LocError):
        ma.loc_quadratic(1.0, 0.2, 0.1, first=0.5)
    with pytest.raises(ma.LocError):
        ma.loc_monomial(1, 0, 0, ma.Weight(1.0, 0.1, first=0.3))


def test_loc_monomial_degrees():
    wt = ma.Weight(2.0, 0.5)
    assert np.all(ma.loc_monomial(2, 1, 1, wt) == 0)     # dimension > 3 is irrelevant
    v = ma.loc_monomial(1, 1, 0, wt)
    assert v[ma.IDX["2"]] == pytest.approx(4 * 2.0)
    assert ma.loc_monomial(0, 0, 0, wt)[0] == 2.0
    x = ma.loc_monomial(0, 0, 1, wt)                     # X = φ_x·φ_y
    assert x[ma.IDX["1"]] == pytest.approx(4.0) and x[ma.IDX["D"]] == pytest.approx(-0.5)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
@settings(max_examples=50, deadline=None)
def test_embed_local_roundtrip(v4):
    v = np.array(v4 + [0.0, 0.0])
    assert np.allclose(ma.loc_local(ma.embed_local(v)), v)


def test_embed_local_rejects_gradients():
    with pytest.raises(ValueError):
        ma.embed_local([0, 0, 0, 0, 1.0, 0])
