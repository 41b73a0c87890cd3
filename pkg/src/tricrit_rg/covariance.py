"""Finite-range decomposition (-Δ + m2)^{-1} = Σ_{j>=1} C_j on Z^3 and the kernel
moments w^{(k)}, w^{(k,**)} built from it.

Construction
------------
Write -Δ + m2 = 6 (s* - P) with P the nearest-neighbour average (symbol
ŝ(k) = (cos k1 + cos k2 + cos k3)/3) and s* = 1 + m2/6, so C = f(P) with
f(s) = 1/(6(s* - s)).  Let q_i(s) = F_{N_i}(s)/F_{N_i}(s*) where F_N is the
Fejér kernel written as a polynomial of degree N-1 in s = cos θ.  Then
0 <= q_i <= 1 on [-1, 1], q_i(s*) = 1, and with Q_J = Π_{i<=J} q_i

    c_J(s) = f(s) Q_{J-1}(s) (1 - q_J(s))

is a polynomial (the root s* of 1 - q_J cancels the pole of f), nonnegative
on [-1, 1].  C_J = c_J(P) is therefore positive semi-definite, has ℓ1-range
deg c_J, and Σ_J c_J = f (1 - Q_∞) = f.  The degrees N_J are chosen so that
deg c_J = ⌈L^J/2⌉ - 1, which gives the exact range |x| < L^J/2.

Kernel entries are produced by the Chebyshev recursion
T_{d+1}(P)δ = 2P T_d(P)δ - T_{d-1}(P)δ on the octant x >= 0 (mirror images
are implied), which vanishes identically outside the ℓ1 ball of radius d.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C

from . import lattice
from .lattice import ScaleContext

CONSTRUCTION_VERSION = "fejer-product-v1"
CACHE_FORMAT = 2
KMAX = 6  # highest power of w stored


class DecompositionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# polynomial construction

def fejer_cheb(N: int) -> np.ndarray:
    """Chebyshev coefficients of F_N(s) = 1 + 2 Σ_{k<N} (1-k/N) T_k(s)."""
    k = np.arange(N)
    c = 2.0 * (1.0 - k / N)
    c[0] = 1.0
    return c


def _acosh1p(d: float) -> float:
    """acosh(1 + d), accurate for small d."""
    return math.log1p(d + math.sqrt(d * (2.0 + d)))


def fejer_at(N: int, s: float) -> float:
    """F_N at a point s >= 1 through the closed form sinh^2(Nθ/2)/(N sinh^2(θ/2))."""
    if s <= 1.0:
        return float(C.chebval(s, fejer_cheb(N)))
    th = _acosh1p(s - 1.0)
    return math.sinh(N * th / 2) ** 2 / (N * math.sinh(th / 2) ** 2)


def fejer_divided_difference(N: int, sstar: float) -> np.ndarray:
    """Chebyshev coefficients of (F_N(s*) - F_N(s)) / (s* - s).

    Uses D_{k+1} = 2 s* D_k + 2 T_k - D_{k-1} for D_k = (T_k(s*) - T_k(s))/(s* - s),
    which avoids polynomial division."""
    out = np.zeros(max(N - 1, 1))
    Dkm1 = np.zeros(N + 1)
    Dk = np.zeros(N + 1)
    Dk[0] = 1.0  # D_1 = 1
    for k in range(1, N):
        wk = 2.0 * (1.0 - k / N)
        out[:k] += wk * Dk[:k]
        Tk = np.zeros(N + 1)
        Tk[k] = 1.0
        Dkp1 = 2.0 * sstar * Dk + 2.0 * Tk - Dkm1
        Dkm1, Dk = Dk, Dkp1
    return out


def fejer_orders(L: int, jmax: int) -> list[int]:
    """N_1..N_jmax so that deg c_J = ⌈L^J/2⌉ - 1 exactly."""
    Ns, used = [], 0
    for J in range(1, jmax + 1):
        R = -(-L ** J // 2) - 1  # ⌈L^J/2⌉ - 1
        n = R + 1 - used + 1
        if n < 2:
            raise DecompositionError(f"degree budget exhausted at scale {J} for L={L}")
        Ns.append(n)
        used += n - 1
    return Ns


@dataclass
class SlicePolynomials:
    L: int
    m2: float
    sstar: float
    N: list
    c: list      # Chebyshev coefficients of c_J, J = 1..jmax
    Q: list      # Chebyshev coefficients of Q_J, J = 0..jmax


def slice_polynomials(L: int, m2: float, jmax: int) -> SlicePolynomials:
    sstar = 1.0 + m2 / 6.0
    Ns = fejer_orders(L, jmax)
    Q = [np.array([1.0])]
    cs = []
    for N in Ns:
        Fs = fejer_at(N, sstar)
        h = fejer_divided_difference(N, sstar) / (6.0 * Fs)  # f (1 - q_J)
        cJ = C.chebmul(Q[-1], h)
        q = fejer_cheb(N) / Fs
        Q.append(C.chebmul(Q[-1], q))
        cs.append(cJ)
    return SlicePolynomials(L, m2, sstar, Ns, cs, Q)


# ---------------------------------------------------------------------------
# octant arrays

def _avg_octant(t: np.ndarray) -> np.ndarray:
    """(P t) on the octant, using the reflection t(-1) = t(1) on each axis."""
    out = np.zeros_like(t)
    for ax in range(3):
        a = np.moveaxis(t, ax, 0)
        o = np.moveaxis(out, ax, 0)
        o[:-1] += a[1:]
        o[1:] += a[:-1]
        o[0] += a[1]
    out /= 6.0
    return out


def multiplicity(R: int) -> np.ndarray:
    m1 = np.where(np.arange(R + 1) == 0, 1.0, 2.0)
    return m1[:, None, None] * m1[None, :, None] * m1[None, None, :]


def octant_coords(R: int):
    r = np.arange(R + 1, dtype=float)
    return np.meshgrid(r, r, r, indexing="ij")


def expand_octant(a: np.ndarray) -> np.ndarray:
    """Full symmetric box (2R+1)^3 from its octant x >= 0."""
    for ax in range(3):
        a = np.concatenate([np.flip(np.take(a, range(1, a.shape[ax]), axis=ax), axis=ax), a], axis=ax)
    return a


def laplacian_octant(a: np.ndarray) -> np.ndarray:
    return 6.0 * (_avg_octant(a) - a)


def pad_octant(a: np.ndarray, R: int) -> np.ndarray:
    """Zero-pad (or check-and-crop) an octant array to radius R."""
    r = a.shape[0] - 1
    if r == R:
        return a
    if r > R:
        if np.any(a[R + 1:]) or np.any(a[:, R + 1:]) or np.any(a[:, :, R + 1:]):
            raise ValueError("cropping would discard nonzero entries")
        return a[:R + 1, :R + 1, :R + 1]
    out = np.zeros((R + 1,) * 3)
    out[:r + 1, :r + 1, :r + 1] = a
    return out


def chebyshev_kernels(coeffs: list, R: int | None = None, pad: int = 2) -> list:
    """Evaluate Σ_d b_d T_d(P) δ_0 for each coefficient array on the octant.

    Each result lives on an octant of radius deg + pad (or a common radius R,
    which must exceed every degree so nothing is truncated)."""
    D = max(len(b) for b in coeffs) - 1
    if R is not None and D >= R:
        raise DecompositionError(f"box radius {R} too small for degree {D}")
    radii = [R if R is not None else len(b) - 1 + pad for b in coeffs]
    acc = [np.zeros((r + 1,) * 3) for r in radii]
    # T_d(P)δ lives in the ℓ1 ball of radius d, so every step only touches
    # the sub-box [0, d+1]^3; the arrays below are over [0, D+1]^3.
    n_all = D + 2
    tm1 = np.zeros((n_all,) * 3)
    t = np.zeros((n_all,) * 3)
    t[0, 0, 0] = 1.0
    for d in range(D + 1):
        n = d + 1
        for a, b in zip(acc, coeffs):
            if d < len(b) and b[d] != 0.0:
                a[:n, :n, :n] += b[d] * t[:n, :n, :n]
        if d == D:
            break
        m = d + 2
        pt = _avg_octant(t[:m, :m, :m])
        # reuse the T_{d-1} buffer (it vanishes outside the sub-box)
        if d > 0:
            np.subtract(2.0 * pt, tm1[:m, :m, :m], out=tm1[:m, :m, :m])
        else:
            tm1[:m, :m, :m] = pt
        tm1, t = t, tm1
    return acc


# ---------------------------------------------------------------------------
# slices

@dataclass
class CovarianceSlice:
    j: int
    m2: float
    L: int
    kernel: np.ndarray  # octant, shape (R+1)^3 with R = degree + 2 > range
    degree: int

    @property
    def range(self) -> float:
        return 0.5 * self.L ** self.j

    def full(self) -> np.ndarray:
        return expand_octant(self.kernel)

    def value(self, x) -> float:
        p = np.abs(lattice.as_point(x))
        if (p >= self.kernel.shape[0]).any():
            return 0.0
        return float(self.kernel[tuple(p)])

    def symbol(self, M: int | None = None) -> np.ndarray:
        """Fourier transform sampled on the M^3 torus grid (M >= 2R+1: exact samples)."""
        full = self.full()
        n = full.shape[0]
        M = M or n
        pad = np.zeros((M, M, M))
        R = (n - 1) // 2
        idx = np.arange(-R, R + 1) % M
        pad[np.ix_(idx, idx, idx)] = full
        return np.fft.fftn(pad).real


def box_radius(L: int, jmax: int) -> int:
    return -(-L ** jmax // 2) + 2


def decompose(ctx: ScaleContext) -> list:
    """Slices C_1..C_{j_max}, each stored on its own octant box of radius deg + 2."""
    polys = slice_polynomials(ctx.L, ctx.m2, ctx.j_max)
    kers = chebyshev_kernels(polys.c)
    out = []
    for J, (k, b) in enumerate(zip(kers, polys.c), start=1):
        if not k[0, 0, 0] > 0:
            raise DecompositionError(f"scale {J}: nonpositive diagonal {k[0,0,0]!r}")
        out.append(CovarianceSlice(J, ctx.m2, ctx.L, k, len(b) - 1))
    return out


def tail_integral(polys: SlicePolynomials, J: int, order: int | None = None) -> float:
    """Σ_{j>J} C_{j;0,0} = ∫ f(ŝ) Q_J(ŝ) d^3k/(2π)^3, by the pyramid quadrature."""
    q = polys.Q[J]
    deg = len(q) - 1
    order = order or (24 + deg)
    ks, wts = lattice._duffy_nodes(float(polys.m2), int(order))
    tot = 0.0
    for p in range(3):
        s = np.cos(ks[p]).sum(axis=0) / 3.0
        tot += float(np.dot(C.chebval(s, q), wts))
    # wts carry ρ²/(m2 + 2Σ(1-cos)); f = 1/(6(s*-ŝ)) is the same denominator
    return tot / math.pi ** 3


# ---------------------------------------------------------------------------
# moments

@dataclass
class KernelMoments:
    """Per-scale moments; index j = 0..jmax (index 0 is the empty sum w_0 = 0)."""
    L: int
    m2: float
    jmax: int
    c: np.ndarray          # C_{j;0,0} (c[0] = nan)
    w: np.ndarray          # w[k, j] = w_j^{(k)}, k = 0..KMAX (row 0 unused)
    wstar: np.ndarray      # wstar[k, j] = w_j^{(k,**)}
    dw_star: np.ndarray    # (Δw_j)^{(1,**)}
    dirichlet: np.ndarray  # Σ_x w_j (-Δ w_j)
    cdelta: np.ndarray     # (Δ C_j)_{0,0}
    extras: dict = field(default_factory=dict)

    @property
    def w1(self):
        return self.w[1]

    @property
    def w2(self):
        return self.w[2]

    @property
    def w3(self):
        return self.w[3]

    @property
    def delta_w3(self):
        return np.diff(self.w[3])

    def delta(self, k: int, star: bool = False) -> np.ndarray:
        return np.diff(self.wstar[k] if star else self.w[k])

    def to_csv(self, path) -> None:
        cols = ["j", "c_j", "w1", "w2", "w3"] + [f"wstar{k}" for k in range(1, 6)] + ["dw_star", "delta_w3"]
        dw3 = np.append(self.delta_w3, np.nan)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for j in range(self.jmax + 1):
                row = [j, self.c[j], self.w[1, j], self.w[2, j], self.w[3, j]]
                row += [self.wstar[k, j] for k in range(1, 6)]
                row += [self.dw_star[j], dw3[j]]
                fh.write(",".join(str(int(v)) if i == 0 else repr(float(v)) for i, v in enumerate(row)) + "\n")


def accumulate(slices: list):
    """w_j = Σ_{i<=j} C_i as octant arrays (on the box of C_j), j = 1..len(slices)."""
    acc = None
    for s in slices:
        R = s.kernel.shape[0] - 1
        acc = s.kernel.copy() if acc is None else pad_octant(acc, R) + s.kernel
        yield acc


def kernel_moments(slices: list, coord: int = 0) -> KernelMoments:
    """w^{(k)}, w^{(k,**)} (x_coord^2 weight), (Δw)^{(1,**)}, and Dirichlet energies."""
    J = len(slices)
    L, m2 = slices[0].L, slices[0].m2
    c = np.full(J + 1, np.nan)
    w = np.zeros((KMAX + 1, J + 1))
    ws = np.zeros((KMAX + 1, J + 1))
    dws = np.zeros(J + 1)
    dir_ = np.zeros(J + 1)
    cdel = np.full(J + 1, np.nan)
    for j, (s, wj) in enumerate(zip(slices, accumulate(slices)), start=1):
        R = wj.shape[0] - 1
        mult = multiplicity(R)
        X = octant_coords(R)[coord] ** 2
        c[j] = s.kernel[0, 0, 0]
        cdel[j] = 6.0 * s.kernel[1, 0, 0] - 6.0 * s.kernel[0, 0, 0]
        p = mult.copy()
        for k in range(1, KMAX + 1):
            p = p * wj if k > 1 else mult * wj
            w[k, j] = p.sum()
            ws[k, j] = (p * X).sum()
        lap = laplacian_octant(wj)
        dws[j] = (mult * X * lap).sum()
        dir_[j] = -(mult * wj * lap).sum()
    return KernelMoments(L, m2, J, c, w, ws, dws, dir_, cdel)


# ---------------------------------------------------------------------------
# λ3

@dataclass
class Lambda3Report:
    value: float
    sequence: np.ndarray
    ratios: np.ndarray
    raw_last: float


def richardson(seq, L: float, order: int = 1) -> float:
    """Remove O(L^{-j}) corrections from the tail of a sequence."""
    s = np.asarray(seq, float)
    for _ in range(order):
        s = (L * s[1:] - s[:-1]) / (L - 1.0)
    return float(s[-1])


def lambda3_estimate(moments: KernelMoments, tol: float = 0.05) -> Lambda3Report:
    """Limit of δ[w^{(3)}]_j (m2 = 0), corrections expected to shrink like L^{-j}."""
    if moments.m2 != 0:
        raise ValueError("lambda3 is defined at m2 = 0")
    d = moments.delta_w3[1:]  # δ[w3]_j, j>=1 (j = 0 is the single-slice value)
    if len(d) < 4:
        raise ValueError("need at least 4 consecutive scales")
    diffs = np.diff(d)
    ratios = diffs[1:] / diffs[:-1]
    target = 1.0 / moments.L
    if not np.all(np.abs(ratios[-2:] - target) < 0.5 * target):
        raise DecompositionError(f"δ[w3] does not plateau: successive ratios {ratios}")
    val = richardson(d, moments.L)
    if abs(val - d[-1]) > tol * abs(val):
        raise DecompositionError("δ[w3] extrapolation correction too large")
    return Lambda3Report(val, d, ratios, float(d[-1]))


# ---------------------------------------------------------------------------
# decomposition bundle with tail closure & cache

@dataclass
class Decomposition:
    ctx: ScaleContext
    polys: SlicePolynomials
    slices: list
    moments: KernelMoments

    def wj(self, j: int) -> np.ndarray:
        """w_j on the octant box of C_j (j = 0: a zero array on the box of C_1)."""
        if j == 0:
            return np.zeros_like(self.slices[0].kernel)
        R = self.slices[j - 1].kernel.shape[0] - 1
        out = np.zeros((R + 1,) * 3)
        for s in self.slices[:j]:
            r = s.kernel.shape[0]
            out[:r, :r, :r] += s.kernel
        return out

    def partial_sum(self, x=(0, 0, 0), j: int | None = None) -> float:
        j = self.ctx.j_max if j is None else j
        return float(sum(s.value(x) for s in self.slices[:j]))

    def tail(self, j: int | None = None) -> float:
        return tail_integral(self.polys, self.ctx.j_max if j is None else j)

    def geometric_tail(self) -> float:
        """Tail estimate from the last slices assuming ratio 1/L per scale (m2 = 0)."""
        c = self.moments.c
        r = c[-1] / c[-2]
        return float(c[-1] * r / (1 - r))


def params_hash(ctx: ScaleContext) -> str:
    key = json.dumps({"L": ctx.L, "m2": float(ctx.m2).hex(), "j": ctx.j_max,
                      "construction": CONSTRUCTION_VERSION}, sort_keys=True)
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def _checksum(arrs: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(arrs):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrs[k]).tobytes())
    return h.hexdigest()


def _cache_path(cache_dir, ctx) -> str:
    return os.path.join(cache_dir, f"decomp_L{ctx.L}_j{ctx.j_max}_{params_hash(ctx)}.npz")


def build(ctx: ScaleContext, cache_dir: str | None = None, log=None) -> Decomposition:
    """Decompose, compute moments, optionally through a checksummed npz cache."""
    polys = slice_polynomials(ctx.L, ctx.m2, ctx.j_max)
    if cache_dir:
        path = _cache_path(cache_dir, ctx)
        if os.path.exists(path):
            try:
                with np.load(path, allow_pickle=False) as z:
                    arrs = {k: z[k] for k in z.files if k != "checksum"}
                    ok = str(z["checksum"]) == _checksum(arrs) and int(arrs["format"]) == CACHE_FORMAT
                if ok:
                    slices = [CovarianceSlice(J + 1, ctx.m2, ctx.L, arrs[f"kernel{J + 1}"], len(polys.c[J]) - 1)
                              for J in range(ctx.j_max)]
                    if log:
                        log(f"cache hit {path}")
                    return Decomposition(ctx, polys, slices, kernel_moments(slices))
                if log:
                    log(f"cache checksum mismatch, recomputing {path}")
            except Exception as exc:  # unreadable → recompute
                if log:
                    log(f"cache unreadable ({exc}), recomputing")
    slices = decompose(ctx)
    dec = Decomposition(ctx, polys, slices, kernel_moments(slices))
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        arrs = {f"kernel{s.j}": s.kernel for s in slices}
        arrs.update({"format": np.array(CACHE_FORMAT),
                "m2": np.array(ctx.m2), "L": np.array(ctx.L)})
        tmp = path + ".tmp.npz"
        np.savez(tmp, checksum=np.array(_checksum(arrs)), **arrs)
        os.replace(tmp, path)
    return dec


# ---------------------------------------------------------------------------
# exact per-scale totals Σ_x C_j = c_j(1)

def _log_fejer_at(N: int, s: float) -> float:
    """log F_N(s) for s >= 1, overflow-free."""
    if s == 1.0:
        return math.log(N)
    th = _acosh1p(s - 1.0)

    def logsinh(x):
        if x < 1.0:
            return math.log(math.sinh(x))
        return x + math.log1p(-math.exp(-2.0 * x)) - math.log(2.0)
    return 2.0 * logsinh(N * th / 2) - math.log(N) - 2.0 * logsinh(th / 2)


def slice_totals(L: int, m2: float, jmax: int) -> np.ndarray:
    """Σ_x C_{j;0,x} for j = 1..jmax, exactly: the symbol of C_j at k = 0.

    c_j(1) = Q_{j-1}(1) (1 - N_j/F_{N_j}(s*)) / m2, and (N_j^2 - 1)/36 at m2 = 0."""
    Ns = fejer_orders(L, jmax)
    sstar = 1.0 + m2 / 6.0
    out = np.zeros(jmax)
    logQ = 0.0  # log Q_{j-1}(1)
    for i, N in enumerate(Ns):
        if m2 == 0:
            out[i] = (N * N - 1) / 36.0
            continue
        r = math.exp(math.log(N) - _log_fejer_at(N, sstar))  # q_j(1)
        out[i] = math.exp(logQ) * (-math.expm1(math.log(r))) / m2 if r > 0 else math.exp(logQ) / m2
        logQ += math.log(r) if r > 0 else -math.inf
    return out


def w1_exact(L: int, m2: float, jmax: int) -> np.ndarray:
    """w_j^{(1)} for j = 0..jmax (w_0 = 0)."""
    return np.concatenate([[0.0], np.cumsum(slice_totals(L, m2, jmax))])


def w1_reduced(L: int, m2: float, jmax: int) -> np.ndarray:
    """L^{-2j} w_j^{(1)} for j = 0..jmax, valid for arbitrarily deep jmax."""
    Ns = fejer_orders(L, jmax)
    sstar = 1.0 + m2 / 6.0
    out = np.zeros(jmax + 1)
    logQ = 0.0
    for j, N in enumerate(Ns, start=1):
        if m2 == 0:
            t = ((N / L ** j) ** 2 - (1 / L ** j) ** 2) / 36.0  # (N^2 - 1)/36 scaled
        else:
            if logQ < -800.0:  # Q_{j-1}(1) underflows: the slice no longer contributes
                t = 0.0
            else:
                lr = math.log(N) - _log_fejer_at(N, sstar)
                t = math.exp(logQ - 2 * j * math.log(L)) * (-math.expm1(lr)) / m2
                logQ += lr
        out[j] = out[j - 1] / (L * L) + t
    return out


# ---------------------------------------------------------------------------
# β-coefficient provider

RELEVANT = ("b2_3", "b1_2", "b1_3")
MARGINAL = ("b3_33", "bD_33", "b2_23", "b2_33", "b1_22", "b1_23", "b1_33")


@dataclass
class SpliceReport:
    j_direct: int
    back_error: dict      # relative error of the back-predicted last direct value
    jump: dict            # relative change across the splice (first extended vs last direct)
    c_inf: float          # limit of L^j C_j used by the relevant model

    @property
    def worst(self) -> float:
        return max(self.back_error.values())


@dataclass
class BetaTable:
    """β coefficients for steps j = 0..depth-1 (direct for j < j_direct)."""
    L: int
    n: int
    m2: float
    j_direct: int
    j_m: float
    coeffs: dict          # name -> array over j
    rc_next: np.ndarray   # L^j C_{j+1;0,0}
    chi: np.ndarray
    w1r: np.ndarray       # L^{-2j} w_j^{(1)}, j = 0..depth
    splice: SpliceReport

    @property
    def depth(self) -> int:
        return len(self.rc_next)

    def __getitem__(self, name):
        return self.coeffs[name]

    def row(self, j: int):
        from .ptmap import BetaRow
        return BetaRow(j, *(float(self.coeffs[k][j]) for k in _beta_names()))

    def extended(self) -> np.ndarray:
        return np.arange(self.depth) >= self.j_direct

    def to_csv(self, path) -> None:
        names = _beta_names()
        with open(path, "w") as fh:
            fh.write(",".join(["j", "extended", "Lj_c_next", "chi"] + list(names)) + "\n")
            for j in range(self.depth):
                row = [str(j), str(int(j >= self.j_direct)), repr(float(self.rc_next[j])), repr(float(self.chi[j]))]
                row += [repr(float(self.coeffs[k][j])) for k in names]
                fh.write(",".join(row) + "\n")


def _beta_names():
    from .ptmap import BETA_NAMES
    return BETA_NAMES


def _anchored(prev2: float, prev1: float, L: int, k: int) -> float:
    """Continue a sequence with O(L^{-j}) corrections k steps past prev1."""
    lim = (L * prev1 - prev2) / (L - 1.0)
    return lim + (prev1 - lim) * float(L) ** (-k)


def _relevant_from_c(a: np.ndarray, n: int) -> dict:
    """Relevant entries from a_j = L^j C_{j+1;0,0}."""
    return {"b2_3": 1.5 * (n + 4) * a, "b1_2": (n + 2) * a, "b1_3": 0.75 * (n + 4) * (n + 2) * a * a}


def _tail_matched(C: np.ndarray, tail: float, L: int, i0: int, k: np.ndarray) -> tuple:
    """A_{i0+k} = L^{i0+k} C_{i0+k}, continued to a limit c∞ with O(L^{-k})
    approach; c∞ is fixed so the extension sums to the exact tail Σ_{i>i0} C_i."""
    A = C[i0] * float(L) ** i0
    cinf = ((L * L - 1.0) * float(L) ** i0 * tail - A) / L
    return cinf + (A - cinf) * float(L) ** (-np.asarray(k, float)), cinf


def _massless_extension(dec, n: int, depth: int, rows) -> tuple:
    """Full-depth massless arrays {name: β_j} plus the splice report."""
    from . import ptmap
    L, J = dec.ctx.L, dec.ctx.j_max
    names = ptmap.BETA_NAMES
    d = {k: np.array([getattr(b, k) for b in rows]) for k in names}  # j = 0..J-1
    C = dec.moments.c.copy()  # C[i] = C_{i;0,0}, i = 1..J
    # tail from the exact Green function (the quadrature tail is the independent check)
    tail = lattice.green_function(0.0, (0, 0, 0)) - float(np.sum(C[1:J + 1]))
    nd = min(depth, J)
    rc = np.zeros(depth)   # L^j C_{j+1} = A_{j+1}/L
    rc[:nd] = C[1:nd + 1] * float(L) ** np.arange(nd)
    _, cinf = _tail_matched(C, tail, L, J, np.array([1]))
    if depth > J:
        A, _ = _tail_matched(C, tail, L, J, np.arange(1, depth - J + 1))
        rc[J:] = A / L
    pred, _ = _tail_matched(C, tail + C[J], L, J - 1, np.array([1]))
    back = {"c_next": abs(pred[0] - C[J] * float(L) ** J) / abs(C[J] * float(L) ** J)}
    rel = _relevant_from_c(rc, n)
    out = {}
    for k in names:
        arr = np.zeros(depth)
        arr[:nd] = d[k][:nd]
        if k in RELEVANT:
            arr[nd:] = rel[k][nd:]
        elif depth > J:
            i = np.arange(1, depth - J + 1)
            lim = (L * d[k][J - 1] - d[k][J - 2]) / (L - 1.0)
            arr[J:] = lim + (d[k][J - 1] - lim) * float(L) ** (-i)
        out[k] = arr
        if k in MARGINAL:
            back[k] = abs(_anchored(d[k][J - 3], d[k][J - 2], L, 1) - d[k][J - 1]) / max(abs(d[k][J - 1]), 1e-300)
    jump = {k: abs(out[k][J] - out[k][J - 1]) / max(abs(out[k][J - 1]), 1e-300)
            for k in names} if depth > J else {}
    return out, rc, SpliceReport(J, back, jump, float(cinf))


def coefficient_provider(dec, n: int, depth: int, tol: float = 0.05, betas=None,
                         reference=None, log=None) -> BetaTable:
    """Hybrid β table: exact rows for j < j_direct, extension beyond.

    Massless extension:
    * relevant entries (∝ C_{j+1;0,0}): L^iC_i continued to a limit fixed by the
      exact tail Σ_{i>J}C_i (so ΣC_i = C_00 holds exactly);
    * marginal entries: O(L^{-j}) approach to their Richardson limits, anchored
      at the last two direct values.
    For m2 > 0 each entry is β_j(0)·S_j where S_j = β_j(m2)/β_j(0) is observed
    for j < j_direct and continued with the profile χ_j = 2^{-(j-j_m)_+};
    `reference` = (massless decomposition, massless rows) supplies β(0).
    The splice is checked on the massless table by back-predicting the last
    direct value from the two before it; a miss above tol raises DecompositionError."""
    from . import ptmap
    ctx = dec.ctx
    L, J, m2 = ctx.L, ctx.j_max, ctx.m2
    if J < 4:
        raise DecompositionError("need at least 4 direct scales for the splice")
    if betas is None:
        betas = ptmap.direct_betas(dec, n)
    depth = int(depth)
    jm = lattice.mass_scale(m2, L)
    js = np.arange(depth)
    chi = np.array([lattice.chi(j, jm) for j in js])
    if m2 == 0:
        coeffs, rc, rep = _massless_extension(dec, n, depth, betas)
    else:
        if reference is None:
            raise ValueError("m2 > 0 needs the massless reference (decomposition, rows)")
        dec0, rows0 = reference
        if dec0.ctx.j_max != J or dec0.ctx.L != L or dec0.ctx.m2 != 0:
            raise ValueError("reference must be the massless decomposition at the same L, j_direct")
        base, rc0, rep = _massless_extension(dec0, n, depth, rows0)
        nd = min(depth, J)
        prof = chi[J - 1:] / lattice.chi(J - 1, jm) if depth > J else np.array([])

        def massive(direct, ref):
            out = ref.copy()
            out[:nd] = direct[:nd]
            if depth > J:
                S = direct[J - 1] / ref[J - 1] if ref[J - 1] != 0 else 1.0
                out[J:] = ref[J:] * S * prof[1:]
            return out
        coeffs = {k: massive(np.array([getattr(b, k) for b in betas]), base[k]) for k in ptmap.BETA_NAMES}
        rc_dir = np.zeros(depth)
        rc_dir[:nd] = dec.moments.c[1:nd + 1] * float(L) ** np.arange(nd)
        rc = massive(rc_dir, rc0)
    if log:
        log(f"splice at j_direct={J}: worst back-prediction error {rep.worst:.3g}")
    if rep.worst > tol:
        bad = {k: v for k, v in rep.back_error.items() if v > tol}
        raise DecompositionError(f"splice mismatch above {tol:.0%} at j_direct={J}: {bad}")
    return BetaTable(L, n, m2, J, jm, coeffs, rc, chi, w1_reduced(L, m2, depth), rep)


def _beta_cache_path(cache_dir, ctx, n) -> str:
    return os.path.join(cache_dir, f"betas_L{ctx.L}_j{ctx.j_max}_n{n}_{params_hash(ctx)}.npz")


def direct_beta_rows(dec, ns, cache_dir: str | None = None, log=None) -> dict:
    """{n: [BetaRow, ...]} for steps j < j_direct, through a checksummed cache.

    The lattice functionals do not depend on n and are computed once."""
    from . import ptmap
    ns = [int(n) for n in ns]
    out, missing = {}, []
    for n in ns:
        if cache_dir:
            path = _beta_cache_path(cache_dir, dec.ctx, n)
            try:
                with np.load(path, allow_pickle=False) as z:
                    arrs = {"rows": z["rows"], "format": z["format"]}
                    if str(z["checksum"]) == _checksum(arrs) and int(arrs["format"]) == CACHE_FORMAT:
                        out[n] = [ptmap.BetaRow(j, *map(float, r)) for j, r in enumerate(arrs["rows"])]
                        continue
            except (OSError, KeyError, ValueError):
                pass
        missing.append(n)
    if missing:
        fs = cached_functionals(dec, cache_dir, log)
        for n in missing:
            rows = ptmap.direct_betas(dec, n, functionals=fs)
            out[n] = rows
            if cache_dir:
                os.makedirs(cache_dir, exist_ok=True)
                arrs = {"rows": np.array([r.as_array() for r in rows]), "format": np.array(CACHE_FORMAT)}
                path = _beta_cache_path(cache_dir, dec.ctx, n)
                tmp = path + ".tmp.npz"
                np.savez(tmp, checksum=np.array(_checksum(arrs)), **arrs)
                os.replace(tmp, path)
    return {n: out[n] for n in ns}


def cached_functionals(dec, cache_dir: str | None = None, log=None) -> list:
    """Lattice functionals of w_j for j = 0..j_direct (n-independent), JSON-cached."""
    from . import ptmap
    J = dec.ctx.j_max
    path = os.path.join(cache_dir, f"functionals_L{dec.ctx.L}_j{J}_{params_hash(dec.ctx)}.json") if cache_dir else None
    if path and os.path.exists(path):
        try:
            with open(path) as fh:
                blob = json.load(fh)
            body = json.dumps(blob["scales"], sort_keys=True)
            if blob.get("checksum") == hashlib.sha256(body.encode()).hexdigest():
                return [ptmap.scale_functionals(None, 0)] + [ptmap.ScaleFunctionals.from_dict(d)
                                                            for d in blob["scales"]]
        except (OSError, ValueError, KeyError):
            pass
    if log:
        log(f"computing lattice functionals to j={J}")
    fs = [ptmap.functionals_from_decomposition(dec, j) for j in range(J + 1)]
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        scales = [f.as_dict() for f in fs[1:]]
        body = json.dumps(scales, sort_keys=True)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump({"checksum": hashlib.sha256(body.encode()).hexdigest(), "scales": scales}, fh)
        os.replace(tmp, path)
    return fs


def default_cache_dir() -> str:
    return os.environ.get("TRICRIT_RG_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "tricrit_rg"))


def beta_table(L: int = 2, n: int = 1, m2: float = 0.0, depth: int = 2000, j_direct: int = 9,
               cache_dir: str | None = "default", tol: float = 0.05, log=None) -> BetaTable:
    """Convenience: decomposition + direct rows + hybrid extension, all cached."""
    if cache_dir == "default":
        cache_dir = default_cache_dir()
    ctx = ScaleContext(L=L, n=n, m2=m2, j_max=j_direct)
    dec = build(ctx, cache_dir=cache_dir, log=log)
    rows = direct_beta_rows(dec, [n], cache_dir=cache_dir, log=log)[n]
    ref = None
    if m2 > 0:
        dec0 = build(ScaleContext(L=L, n=n, m2=0.0, j_max=j_direct), cache_dir=cache_dir, log=log)
        ref = (dec0, direct_beta_rows(dec0, [n], cache_dir=cache_dir, log=log)[n])
    return coefficient_provider(dec, n, depth, tol=tol, betas=rows, reference=ref, log=log)
