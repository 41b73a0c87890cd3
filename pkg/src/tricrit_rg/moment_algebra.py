"""Single-site polynomial algebra for O(n)-invariant fields.

Bulk monomials, in the coupling order (u, ν, g, a, y, z):

    1, τ, τ², τ³, τ_∇∇, τ_Δ      with τ = ½|φ|²,
    τ_Δ  = ½ φ·(-Δφ),   τ_∇∇ = ¼ Σ_{|e|=1} ∇^eφ·∇^eφ.

Bilocal products f(φ_x) g(φ_y) are handled through the invariants
A = |φ_x|², B = |φ_y|², X = φ_x·φ_y.  On such functions

    Σ_i ∂_{x_i}∂_{y_i}  = 4X ∂_A∂_B + 2A ∂_A∂_X + 2B ∂_B∂_X + X ∂_X² + n ∂_X   (Dop)
    Σ_i ∂_{x_i}²        = 2n ∂_A + 4A ∂_A² + 4X ∂_A∂_X + B ∂_X²              (lap_x)

so F_w(f_x, g_y) = Σ_k (w_xy^k / k!) Dop^k (f g) and
e^{L_C} = exp(½ C_00 (lap_x + lap_y) + C_xy Dop) on bilocal terms.
Polynomials are dicts {(a, b, g): coeff} standing for A^a B^b X^g; the
coefficient type is whatever supports + and * (floats, Fractions, sympy).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
import sympy as sp

LABELS = ("0", "1", "2", "3", "NN", "D")      # 1, τ, τ², τ³, τ_∇∇, τ_Δ
COUPLINGS = ("u", "nu", "g", "a", "y", "z")
IDX = {lab: i for i, lab in enumerate(LABELS)}
DIMENSION = {"0": 0, "1": 1, "2": 2, "3": 3, "NN": 3, "D": 3}
N_BASIS = len(LABELS)

n_sym = sp.Symbol("n")


# ---------------------------------------------------------------------------
# Wick matrix

def wick_matrix(c: float, cdelta: float, n: float) -> np.ndarray:
    """Matrix of e^{L_C} on (u, ν, g, a, y, z); c = C_00 and cdelta = (ΔC)_00.

    Column p holds the image of the monomial M^p (so U_new = M @ U)."""
    M = np.eye(N_BASIS)
    M[0, 1] = 0.5 * n * c
    M[0, 2] = 0.25 * n * (n + 2) * c ** 2
    M[0, 3] = 0.125 * n * (n + 2) * (n + 4) * c ** 3     # E[(|ξ|²/2)³]
    M[0, 4] = -0.5 * n * cdelta
    M[0, 5] = -0.5 * n * cdelta
    M[1, 2] = (n + 2) * c
    M[1, 3] = 0.75 * (n + 4) * (n + 2) * c ** 2
    M[2, 3] = 1.5 * (n + 4) * c
    return M


def wick_apply(c: float, cdelta: float, n: float, U) -> np.ndarray:
    """e^{L_C} U for a bulk coupling vector U = (u, ν, g, a, y, z)."""
    return wick_matrix(c, cdelta, n) @ np.asarray(U, dtype=float)


# ---------------------------------------------------------------------------
# invariant polynomials

def padd(p: dict, q: dict, s=1) -> dict:
    out = dict(p)
    for k, v in q.items():
        out[k] = out.get(k, 0) + s * v
    return {k: v for k, v in out.items() if not _is_zero(v)}


def pscale(p: dict, s) -> dict:
    return {k: v * s for k, v in p.items() if not _is_zero(v * s)}


def _is_zero(v) -> bool:
    if isinstance(v, sp.Basic):
        return sp.expand(v) == 0
    return v == 0


def dop(p: dict, n) -> dict:
    """Cross contraction Σ_i ∂/∂φ_x^i ∂/∂φ_y^i in invariant coordinates."""
    out = {}
    for (a, b, g), c in p.items():
        if a and b:
            k = (a - 1, b - 1, g + 1)
            out[k] = out.get(k, 0) + 4 * a * b * c
        if g:
            k = (a, b, g - 1)
            out[k] = out.get(k, 0) + g * (2 * a + 2 * b + g - 1 + n) * c
    return {k: v for k, v in out.items() if not _is_zero(v)}


def lap_x(p: dict, n) -> dict:
    out = {}
    for (a, b, g), c in p.items():
        if a:
            k = (a - 1, b, g)
            out[k] = out.get(k, 0) + a * (2 * n + 4 * (a - 1) + 4 * g) * c
        if g >= 2:
            k = (a, b + 1, g - 2)
            out[k] = out.get(k, 0) + g * (g - 1) * c
    return {k: v for k, v in out.items() if not _is_zero(v)}


def lap_y(p: dict, n) -> dict:
    sw = {(b, a, g): c for (a, b, g), c in p.items()}
    return {(a, b, g): c for (b, a, g), c in lap_x(sw, n).items()}


def single_site_laplacian_power(q: int, n):
    """Δ_φ τ^q = q (2q - 2 + n) τ^{q-1}."""
    return q * (2 * q - 2 + n)


def tau_power(p: int, site: str, one=1) -> dict:
    """τ^p = A^p / 2^p at site x ('x') or B^p/2^p at y ('y')."""
    c = one / (2 ** p) if not isinstance(one, int) else Fraction(1, 2 ** p)
    return {(p, 0, 0): c} if site == "x" else {(0, p, 0): c}


def contraction_terms(P: dict, Qp: dict, n, kmax: int | None = None) -> dict:
    """F_w(P_x, Q_y) as {k: poly}: F = Σ_k w_xy^k * poly_k (k! already divided)."""
    prod = {}
    for (a1, _, _), c1 in P.items():
        for (_, b2, _), c2 in Qp.items():
            k = (a1, b2, 0)
            prod[k] = prod.get(k, 0) + c1 * c2
    degs = [a for (a, _, _) in P] + [0]
    degq = [b for (_, b, _) in Qp] + [0]
    kmax = kmax if kmax is not None else 2 * min(max(degs), max(degq))
    out, cur, fact = {}, prod, 1
    for k in range(1, kmax + 1):
        cur = dop(cur, n)
        fact *= k
        if not cur:
            break
        out[k] = pscale(cur, Fraction(1, fact) if not isinstance(n, float) else 1.0 / fact)
    return out


# ---------------------------------------------------------------------------
# contraction table

@dataclass(frozen=True)
class ContractionTable:
    """c[(p, q, k)] = Dop^k(|φ_x|^{2p} |φ_y|^{2q}) / k!  as invariant polynomials in
    (A, B, X) with coefficients polynomial in n (exact)."""
    entries: dict
    n: object

    def poly(self, p: int, q: int, k: int) -> dict:
        return self.entries.get((p, q, k), {})

    def at_n1(self, p: int, q: int, k: int):
        """Scalar coefficient c_{p,q,k} of w^k φ_x^{2p-k} φ_y^{2q-k} when n = 1."""
        tot = sum(self.poly(p, q, k).values(), sp.Integer(0))
        return sp.nsimplify(sp.sympify(tot).subs(n_sym, 1))

    def to_json(self) -> str:
        rows = []
        for (p, q, k), poly in sorted(self.entries.items()):
            for (a, b, g), c in sorted(poly.items()):
                rows.append({"p": p, "q": q, "k": k, "monomial": f"A^{a} B^{b} X^{g}",
                             "coefficient": str(sp.factor(c))})
        return json.dumps(rows, indent=1)


@lru_cache(maxsize=16)
def contraction_coefficients(n=None, pmax: int = 3) -> ContractionTable:
    """Exact table for p, q <= pmax; n=None keeps n symbolic."""
    nn = n_sym if n is None else sp.Integer(n)
    ent = {}
    for p in range(1, pmax + 1):
        for q in range(1, pmax + 1):
            cur = {(p, q, 0): sp.Integer(1)}
            for k in range(1, 2 * min(p, q) + 2):
                cur = {kk: sp.expand(v) for kk, v in dop(cur, nn).items()}
                if not cur:
                    break
                ent[(p, q, k)] = {kk: sp.expand(v / math.factorial(k)) for kk, v in cur.items()}
    return ContractionTable(ent, n)


# ---------------------------------------------------------------------------
# Loc

class LocError(ValueError):
    pass


@dataclass
class Weight:
    """Moments of a kernel p(x-y): p1 = Σ p, pstar = Σ y_1^2 p, first = Σ y_1 p."""
    p1: float
    pstar: float
    first: float = 0.0


def loc_quadratic(G0: float, S: float, T: float, first=0.0, tol: float = 1e-9) -> np.ndarray:
    """Loc of Σ G(a,b) φ_{x+a}·φ_{x+b}: moments G0 = ΣG, S = ΣG(a1²+b1²),
    T = ΣG a1 b1, first = ΣG(a+b).  Second-order Taylor expansion gives
    2 G0 τ - S τ_Δ + 2T τ_∇∇  (τ_Δ ~ -½φΔφ, τ_∇∇ ~ ½|∇φ|²)."""
    scale = max(abs(G0), abs(S), abs(T), 1e-300)
    if np.max(np.abs(np.atleast_1d(first))) > tol * scale:
        raise LocError(f"kernel has a nonvanishing first moment {first}")
    out = np.zeros(N_BASIS)
    out[IDX["1"]] = 2.0 * G0
    out[IDX["D"]] = -S
    out[IDX["NN"]] = 2.0 * T
    return out


def loc_monomial(a: int, b: int, g: int, wt: Weight) -> np.ndarray:
    """Loc_x Σ_y p(y-x) A_x^a B_y^b X^g on the basis (1, τ, τ², τ³, τ_∇∇, τ_Δ)."""
    if abs(wt.first) > 1e-9 * max(abs(wt.p1), abs(wt.pstar), 1e-300):
        raise LocError("kernel violates Σ p_x x_i = 0")
    d = a + b + g
    out = np.zeros(N_BASIS)
    if d > 3:
        return out
    if d == 0:
        out[0] = wt.p1
        return out
    if d >= 2:
        out[d] = (2.0 ** d) * wt.p1
        return out
    # quadratic: A -> 2τ p1; B -> 2[p1 τ + p**(τ_∇∇ - τ_Δ)]; X -> 2[p1 τ - ½ p** τ_Δ]
    if a:
        out[1] = 2.0 * wt.p1
    elif b:
        out = loc_quadratic(wt.p1, 2.0 * wt.pstar, wt.pstar)
    else:
        out = loc_quadratic(wt.p1, wt.pstar, 0.0)
    return out


def loc_poly(poly: dict, wt: Weight) -> np.ndarray:
    out = np.zeros(N_BASIS)
    for (a, b, g), c in poly.items():
        out += float(c) * loc_monomial(a, b, g, wt)
    return out


def loc_point(a: int, b: int, g: int, wt: Weight) -> np.ndarray:
    """Point localisation of Σ_y p_{x-y} |φ_x|^{2a} |φ_y|^{2b} (φ_x·φ_y)^g."""
    return loc_monomial(a, b, g, wt)


def embed_local(v) -> dict:
    """A 6-vector of bulk couplings restricted to (1, τ, τ², τ³) as a polynomial in A."""
    v = np.asarray(v, float)
    if abs(v[4]) > 0 or abs(v[5]) > 0:
        raise ValueError("gradient monomials have no single-site invariant form")
    return {(d, 0, 0): v[d] / 2.0 ** d for d in range(4) if v[d] != 0.0}


def loc_local(poly_x: dict) -> np.ndarray:
    """Loc of a single-site polynomial in A = |φ_x|² (degree > 6 dropped)."""
    out = np.zeros(N_BASIS)
    for (a, b, g), c in poly_x.items():
        if b or g:
            raise ValueError("not single-site")
        if a <= 3:
            out[a] += float(c) * 2.0 ** a
    return out
