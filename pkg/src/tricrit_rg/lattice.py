"""Lattice geometry on Z^3: Laplacian, Green functions, torus resolvents and
the two pieces of scale bookkeeping (mass scale, coalescence scale).

Conventions: (Δf)_x = Σ_{|e|=1} (f_{x+e} - f_x), so -Δ has symbol
2 Σ_i (1 - cos k_i) and  C(m2) = (-Δ + m2)^{-1}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

DIM = 3
INF_SCALE = math.inf


class QuadratureError(RuntimeError):
    """Raised when a Green-function quadrature misses its tolerance."""

    def __init__(self, msg, achieved=None):
        super().__init__(msg)
        self.achieved = achieved


@dataclass(frozen=True)
class ScaleContext:
    L: int = 2
    n: int = 1
    m2: float = 0.0
    j_max: int = 7

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 2:
            raise ValueError(f"L must be an integer >= 2, got {self.L}")
        if not (0.0 <= self.m2 <= 1.0):
            raise ValueError(f"m2 must lie in [0, 1], got {self.m2}")
        if self.j_max < 1:
            raise ValueError("j_max must be >= 1")
        if self.n < 0:
            raise ValueError("n must be >= 0")


def as_point(x) -> np.ndarray:
    p = np.asarray(x, dtype=np.int64).reshape(-1)
    if p.size == 1:
        p = np.array([p[0], 0, 0], dtype=np.int64)
    if p.size != DIM:
        raise ValueError(f"lattice point needs {DIM} coordinates, got {x!r}")
    return p


def reduce_torus(x, side: int) -> np.ndarray:
    """Reduce to the centred fundamental domain (-side/2, side/2]."""
    p = np.mod(as_point(x), side)
    return np.where(p > side // 2, p - side, p)


def laplacian_symbol(k) -> np.ndarray:
    """Symbol of -Δ, 2 Σ (1 - cos k_i); ``k`` has the coordinate axis first."""
    k = np.asarray(k, dtype=float)
    return 2.0 * np.sum(1.0 - np.cos(k), axis=0)


def torus_laplacian(side: int) -> np.ndarray:
    """Dense matrix of Δ on the torus of period ``side`` (side^3 x side^3)."""
    N = side ** DIM
    idx = np.arange(N).reshape((side,) * DIM)
    M = np.zeros((N, N))
    for ax in range(DIM):
        for s in (1, -1):
            nb = np.roll(idx, s, axis=ax).ravel()
            # side == 2: both neighbours coincide, entries add up to 2 as they should
            np.add.at(M, (idx.ravel(), nb), 1.0)
    M[np.diag_indices(N)] -= 2 * DIM
    return M


def apply_laplacian(f: np.ndarray) -> np.ndarray:
    """Periodic Δf of a 3-d array (zero-padded boxes behave like Z^3 if the
    support stays one site away from the edge)."""
    out = -2.0 * DIM * f
    for ax in range(DIM):
        out = out + np.roll(f, 1, axis=ax) + np.roll(f, -1, axis=ax)
    return out


# ---------------------------------------------------------------------------
# Green function on Z^3

def _rho_panels(m2: float) -> np.ndarray:
    # geometric grading towards the (near) singularity at k = 0
    lo = max(math.sqrt(m2), 1e-3) if m2 > 0 else None
    if lo is None:
        return np.array([0.0, math.pi / 4, math.pi / 2, math.pi])
    edges = [0.0]
    r = lo / 4
    while r < math.pi / 2:
        edges.append(r)
        r *= 3.0
    edges.append(math.pi)
    return np.array(edges)


@lru_cache(maxsize=32)
def _duffy_nodes(m2: float, order: int):
    """Nodes/weights for ∫_{[0,π]^3} g(k) dk on the 3 pyramids k_p = max.

    Returned k has shape (3 pyramids, 3 coords, npts); the weights include the
    Jacobian ρ^2 and the factor 1/D(k)."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    edges = _rho_panels(m2)
    rr, wr = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        rr.append(0.5 * (b - a) * xg + 0.5 * (a + b))
        wr.append(0.5 * (b - a) * wg)
    rr = np.concatenate(rr)
    wr = np.concatenate(wr)
    uu = 0.5 * (xg + 1)
    wu = 0.5 * wg
    R, U, V = np.meshgrid(rr, uu, uu, indexing="ij")
    W = (wr[:, None, None] * wu[None, :, None] * wu[None, None, :]).ravel()
    R, U, V = R.ravel(), U.ravel(), V.ravel()
    k_max, k_a, k_b = R, R * U, R * V
    # rho^2 / D rewritten to avoid 0/0 at rho = 0 when m2 = 0
    def half(t):  # 2(1-cos t) = 4 sin^2(t/2)
        return 4.0 * np.sin(0.5 * t) ** 2
    D = m2 + half(k_max) + half(k_a) + half(k_b)
    with np.errstate(invalid="ignore", divide="ignore"):
        jac = np.where(R > 0, R * R / D, 0.0)
    wts = W * jac
    ks = []
    for p in range(DIM):
        order_ = [k_a, k_b]
        k = [None] * DIM
        k[p] = k_max
        others = [i for i in range(DIM) if i != p]
        k[others[0]], k[others[1]] = order_
        ks.append(np.stack(k))
    return np.stack(ks), wts


def _green_fourier(m2: float, x: np.ndarray, order: int) -> float:
    ks, wts = _duffy_nodes(float(m2), order)
    phase = np.prod(np.cos(ks * x[None, :, None]), axis=1)  # (3, npts)
    return float(np.sum(phase @ wts)) / math.pi ** 3


def _gamma_upper_neg(s: float, z: float) -> float:
    """∫_1^∞ e^{-z t} t^{-s} dt · z^{1-s} = Γ(1-s, z) for half-integer s >= 3/2."""
    a = 0.5
    val = math.sqrt(math.pi) * special.erfc(math.sqrt(z))
    while a > 1.0 - s + 1e-12:
        # Γ(a-1, z) = (Γ(a, z) - z^{a-1} e^{-z}) / (a-1)
        val = (val - z ** (a - 1) * math.exp(-z)) / (a - 1)
        a -= 1.0
    return val


def _tail_integral(s: float, m2: float, T: float) -> float:
    """∫_T^∞ e^{-m2 t} t^{-s} dt."""
    if m2 * T < 1e-10:
        return T ** (1 - s) / (s - 1)
    if m2 * T > 700:
        return 0.0
    return m2 ** (s - 1) * _gamma_upper_neg(s, m2 * T)


def _green_heat(m2: float, x: np.ndarray, T: float = 4.0e6) -> tuple[float, float]:
    """G = ∫_0^∞ e^{-m2 t} Π_i ive(x_i, 2t) dt  (heat kernel of Δ on Z^3)."""
    xa = np.abs(x).astype(float)

    def f(t):
        return math.exp(-m2 * t) * float(np.prod(special.ive(xa, 2.0 * t)))

    edges = [0.0] + list(np.geomspace(0.25, T, 40))
    # the integrand peaks around t ~ |x|^2/6; keep a node there
    tot, err = 0.0, 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        v, e = integrate.quad(f, a, b, epsabs=1e-16, epsrel=1e-13, limit=200)
        tot += v
        err += e
    # ive(nu, z) ~ (2πz)^{-1/2} (1 - (4nu^2-1)/(8z) + (4nu^2-1)(4nu^2-9)/(2(8z)^2) ...)
    # with z = 2t; expand the product to second order in 1/t.
    mu = 4.0 * xa ** 2
    a1 = -(mu - 1.0) / 16.0
    a2 = (mu - 1.0) * (mu - 9.0) / (2.0 * 256.0)
    c1 = a1.sum()
    c2 = a2.sum() + (c1 ** 2 - (a1 ** 2).sum()) / 2.0
    pref = (4.0 * math.pi) ** -1.5
    tail = pref * (_tail_integral(1.5, m2, T) + c1 * _tail_integral(2.5, m2, T)
                   + c2 * _tail_integral(3.5, m2, T))
    return tot + tail, err + abs(pref * c2 * T ** -3.5) * 10


def green_function(m2: float, x=(0, 0, 0), tol: float = 1e-10, method: str = "auto") -> float:
    """((-Δ_{Z^3} + m2)^{-1})_{0,x}.

    method="fourier": Gauss-Legendre quadrature of the Fourier integral after a
    Duffy (pyramid) transform that removes the k=0 singularity; the error is
    estimated by comparing two orders.  method="heat": Laplace transform of
    the heat kernel Π I_{x_i}(2t)e^{-6t} with an asymptotic tail; preferred for
    large |x| where the Fourier integrand oscillates.  "auto" picks by |x|.
    """
    if m2 < 0:
        raise ValueError("m2 must be >= 0")
    p = np.abs(as_point(x))
    if not np.isfinite(m2):
        return 0.0
    if m2 > 1e8:
        return (1.0 / m2) if not p.any() else 0.0
    if method == "auto":
        method = "fourier" if p.max() <= 12 else "heat"
    if method == "heat":
        val, err = _green_heat(float(m2), p)
        if not err < tol:
            raise QuadratureError(f"heat-kernel quadrature error {err:.2e} > tol {tol:.1e}", err)
        return val
    if method != "fourier":
        raise ValueError(f"unknown method {method!r}")
    base = 20 + 2 * int(p.max())
    prev = _green_fourier(m2, p, base)
    for order in (int(base * 1.5), base * 2, base * 3):
        val = _green_fourier(m2, p, order)
        err = abs(val - prev)
        if err < tol:
            return val
        prev = val
    raise QuadratureError(f"Fourier quadrature error {err:.2e} > tol {tol:.1e}", err)


def polya_return_probability() -> float:
    """Return probability of simple random walk on Z^3, from C_00 = (1/6)/(1-p)."""
    return 1.0 - 1.0 / (6.0 * green_function(0.0, (0, 0, 0)))


# ---------------------------------------------------------------------------
# torus

@lru_cache(maxsize=64)
def _torus_table(side: int, nu: float) -> np.ndarray:
    k = 2 * np.pi * np.fft.fftfreq(side) * 1.0
    K = np.meshgrid(k, k, k, indexing="ij")
    lam = laplacian_symbol(np.stack(K))
    tab = np.fft.ifftn(1.0 / (lam + nu)).real
    tab.setflags(write=False)
    return tab


def torus_resolvent(side: int, nu: float, x=(0, 0, 0)) -> float:
    """((-Δ_Λ + nu)^{-1})_{0,x} on the torus Z^3 / side Z^3 (exact DFT sum)."""
    if side < 2:
        raise ValueError("side must be >= 2")
    if not nu > 0:
        raise ValueError("nu must be > 0 (the constant mode makes -Δ singular)")
    tab = _torus_table(int(side), float(nu))
    i, j, k = np.mod(as_point(x), side)
    return float(tab[i, j, k])


def torus_resolvent_table(side: int, nu: float) -> np.ndarray:
    if not nu > 0:
        raise ValueError("nu must be > 0")
    return np.array(_torus_table(int(side), float(nu)))


# ---------------------------------------------------------------------------
# scales

def coalescence_scale(a, b, L: int) -> int:
    """Unique j with ½L^j <= |a-b| < ½L^{j+1} (Euclidean norm), exact in integers."""
    d = as_point(a) - as_point(b)
    r2 = int(np.dot(d, d))
    if r2 == 0:
        raise ValueError("coalescence scale undefined for a == b")
    # condition: L^{2j} <= 4 r2 < L^{2j+2}
    target, j, p = 4 * r2, 0, 1
    while p * L * L <= target:
        p *= L * L
        j += 1
    return j


def mass_scale(m2: float, L: int):
    """Largest j with m L^j <= 1 (math.inf when m2 = 0)."""
    if m2 < 0:
        raise ValueError("m2 must be >= 0")
    if m2 == 0:
        return INF_SCALE
    j, p = 0, 1.0
    if m2 > 1.0:
        # m L^0 > 1: by convention the mass scale is 0 here too (none smaller exists)
        return 0
    while m2 * (p * L) ** 2 <= 1.0 * (1 + 1e-14):
        p *= L
        j += 1
    return j


def chi(j, j_m) -> float:
    """Decay profile 2^{-(j - j_m)_+}."""
    if j_m == INF_SCALE:
        return 1.0
    return 2.0 ** (-max(j - j_m, 0))
