"""Second-order perturbative RG map on the bulk couplings.

κ tables: Q(M^p_x, M^q(Λ)) = ½ Loc_x Σ_y F_{w_j}(M^p_x, M^q_y) = Σ_i κ_i^{pq} M^i_x.

Four cases are needed, according to whether each slot is a power of τ or a
gradient monomial written as a pair form  M = Σ K(z,z') ½ φ_{x+z}·φ_{x+z'}
(z, z' in the unit stencil).  When the gradient monomial sits in the summed
slot only Γ = Σ_y M_y = ½ φ·(-Δ)φ matters, for either τ_Δ or τ_∇∇.  All
the lattice sums reduce to w-moments, the energy Σ w(-Δw), and the
correlations R(d) = Σ_v w_v w_{v+d}, R2(d) = Σ_v w_v w_{v+d} v_1², RH(d) = Σ_v w_v (-Δw)_{v+d}.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import moment_algebra as ma
from .covariance import KMAX, laplacian_octant, multiplicity, octant_coords, pad_octant

DIM = np.array([ma.DIMENSION[l] for l in ma.LABELS])
I0, I1, I2, I3, INN, ID = range(6)
TAU = {1: I1, 2: I2, 3: I3}
STENCIL = [(0, 0, 0)] + [tuple(s * (np.arange(3) == i)) for i in range(3) for s in (1, -1)]
STENCIL = [tuple(int(c) for c in z) for z in STENCIL]


def _kform(kind: str) -> dict:
    """K(z, z') for τ_Δ ('D'), τ_∇∇ ('NN') or the total Laplacian -½Δτ ('TOT')."""
    K = {}
    if kind == "D":
        K[(STENCIL[0], STENCIL[0])] = 6.0
        for e in STENCIL[1:]:
            K[(STENCIL[0], e)] = K[(e, STENCIL[0])] = -0.5
    elif kind == "NN":
        K[(STENCIL[0], STENCIL[0])] = 3.0
        for e in STENCIL[1:]:
            K[(e, e)] = 0.5
            K[(STENCIL[0], e)] = K[(e, STENCIL[0])] = -0.5
    elif kind == "TOT":
        K[(STENCIL[0], STENCIL[0])] = 3.0
        for e in STENCIL[1:]:
            K[(e, e)] = -0.5
    else:
        raise ValueError(kind)
    return K


# ---------------------------------------------------------------------------
# lattice functionals of one kernel

def _shift_view(a: np.ndarray, d) -> np.ndarray:
    """a(v + d) on the octant grid v >= 0, for a symmetric a stored on its octant."""
    R = a.shape[0] - 1
    r = np.arange(R + 1)
    ix = [np.minimum(np.abs(r + int(di)), R) for di in d]
    return a[np.ix_(*ix)]


def zsum_pair(a: np.ndarray, b: np.ndarray, d, m: int = 0, axis: int = 0, mult=None, X=None) -> float:
    """Σ_{v∈Z³} a(v) b(v+d) v_axis^m for reflection-symmetric a, b (octants, last layer zero).

    Symmetrise over the eight reflections σ: Σ_Z³ G = Σ_{v>=0} mult(v) avg_σ G(σv),
    and G(σv) = a(v) b(v + σd) (σ_axis v_axis)^m."""
    R = a.shape[0] - 1
    mult = multiplicity(R) if mult is None else mult
    acc = np.zeros_like(a)
    # reflections of axes with d_i = 0 act trivially (unless they carry an odd power)
    axes = [i for i in range(3) if d[i] != 0 or (i == axis and m % 2)]
    sigs = list(itertools.product((1, -1), repeat=len(axes)))
    for sub in sigs:
        sig = [1, 1, 1]
        for i, s in zip(axes, sub):
            sig[i] = s
        sd = [s * di for s, di in zip(sig, d)]
        v = _shift_view(b, sd)
        acc += v * (sig[axis] ** m)
    acc *= a * mult / len(sigs)
    if m:
        X = octant_coords(R)[axis] if X is None else X
        acc *= X ** m
    return float(acc.sum())


def _canon_R(d):
    return tuple(sorted(abs(int(c)) for c in d))


def _canon_R2(d):
    return (abs(int(d[0])),) + tuple(sorted((abs(int(d[1])), abs(int(d[2])))))


@dataclass
class ScaleFunctionals:
    """Everything κ needs about w_j."""
    j: int
    w: np.ndarray       # w[k] = Σ w^k, k = 0..KMAX
    wstar: np.ndarray   # Σ x_1² w^k
    dw_star: float      # Σ x_1² Δw
    energy: float       # Σ w(-Δw)
    R: dict
    R2: dict
    RH: dict

    def r(self, d):
        return self.R[_canon_R(d)]

    def r1(self, d):
        return -0.5 * d[0] * self.r(d)

    def r2(self, d):
        return self.R2[_canon_R2(d)]

    def rh(self, d):
        return self.RH[_canon_R(d)]

    def as_dict(self) -> dict:
        return {"j": self.j, "w": self.w.tolist(), "wstar": self.wstar.tolist(),
                "dw_star": self.dw_star, "energy": self.energy,
                "R": {str(k): v for k, v in self.R.items()},
                "R2": {str(k): v for k, v in self.R2.items()},
                "RH": {str(k): v for k, v in self.RH.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleFunctionals":
        keys = lambda m: {tuple(int(c) for c in k.strip("()").split(",") if c.strip()): float(v)
                          for k, v in m.items()}
        return cls(int(d["j"]), np.array(d["w"], float), np.array(d["wstar"], float),
                   float(d["dw_star"]), float(d["energy"]), keys(d["R"]), keys(d["R2"]), keys(d["RH"]))


def scale_functionals(w: np.ndarray | None, j: int, R: int | None = None) -> ScaleFunctionals:
    """w: octant array of w_j (None or all-zero for j = 0)."""
    if w is None:
        return ScaleFunctionals(j, np.zeros(KMAX + 1), np.zeros(KMAX + 1), 0.0, 0.0,
                                _ZeroDict(), _ZeroDict(), _ZeroDict())
    Rb = w.shape[0] - 1
    if np.any(w[-1] != 0) or np.any(w[:, -1] != 0) or np.any(w[:, :, -1] != 0):
        raise ValueError("kernel octant must vanish on its outer layer")
    mult = multiplicity(Rb)
    X = octant_coords(Rb)[0]
    X2 = X ** 2
    wk = np.zeros(KMAX + 1)
    wsk = np.zeros(KMAX + 1)
    p = mult.copy()
    wk[0], wsk[0] = np.nan, np.nan
    for k in range(1, KMAX + 1):
        p = p * w
        wk[k] = p.sum()
        wsk[k] = (p * X2).sum()
    lap = laplacian_octant(w)
    h = -lap
    dws = float((mult * X2 * lap).sum())
    energy = float((mult * w * h).sum())
    Rd, R2d, RHd = {}, {}, {}
    for d in _l1_ball(3):
        key = _canon_R(d)
        if key not in Rd:
            Rd[key] = zsum_pair(w, w, key, mult=mult)
            RHd[key] = zsum_pair(w, h, key, mult=mult)
    for d in _l1_ball(2):
        key = _canon_R2(d)
        if key not in R2d:
            R2d[key] = zsum_pair(w, w, key, m=2, mult=mult, X=X)
    return ScaleFunctionals(j, wk, wsk, dws, energy, Rd, R2d, RHd)


class _ZeroDict(dict):
    def __missing__(self, key):
        return 0.0


def _l1_ball(r: int):
    rng = range(-r, r + 1)
    return [d for d in itertools.product(rng, rng, rng) if sum(map(abs, d)) <= r]


# ---------------------------------------------------------------------------
# κ

@dataclass
class KappaTable:
    j: int
    L: int
    n: int
    kappa: np.ndarray   # kappa[i, p, q], labels in moment_algebra.LABELS order
    reading: str = "honest"

    @property
    def hat(self) -> np.ndarray:
        e = -3 - DIM[:, None, None] + DIM[None, :, None] + DIM[None, None, :]
        return self.kappa * float(self.L) ** (self.j * e)

    def entry(self, i: str, p: str, q: str, hat: bool = False) -> float:
        t = self.hat if hat else self.kappa
        return float(t[ma.IDX[i], ma.IDX[p], ma.IDX[q]])

    def symmetrised(self) -> np.ndarray:
        return 0.5 * (self.kappa + self.kappa.transpose(0, 2, 1))

    def rows(self):
        for i, p, q in itertools.product(range(6), repeat=3):
            yield ma.LABELS[i], ma.LABELS[p], ma.LABELS[q], float(self.kappa[i, p, q]), float(self.hat[i, p, q])


def _quad_form_loc(G0, S, T, first=0.0):
    return ma.loc_quadratic(G0, S, T, first)


def _kform_slot_tau(K: dict, q: int, f: ScaleFunctionals, n) -> np.ndarray:
    """½ Loc_x Σ_y F_w(M^K_x, τ_y^q)."""
    out = np.zeros(6)
    Ksum = sum(K.values())
    w1, ws1 = f.w[1], f.wstar[1]
    lapq = ma.single_site_laplacian_power(q, n)   # Δ_φ τ^q = lapq τ^{q-1}
    # k = 1: Σ K(z,z') w(y-x-z) φ_{x+z'}·φ_y q τ_y^{q-1}
    if q == 1:
        G0 = Ksum * w1
        S = sum(k * ((zp[0] ** 2 + z[0] ** 2) * w1 + ws1) for (z, zp), k in K.items())
        T = sum(k * zp[0] * z[0] * w1 for (z, zp), k in K.items())
        first = sum(k * (zp[0] + z[0]) * w1 for (z, zp), k in K.items())
        out += _quad_form_loc(G0, S, T, first)
    else:
        # degree 2q >= 4: constant-field value 2q τ^q times the total weight w1 ΣK
        out[TAU[q]] += 2.0 * q * Ksum * w1
    # k = 2: ½ Σ K w(b-z) w(b-z') lapq τ_{x+b}^{q-1}
    if q == 1:
        out[I0] += 0.5 * lapq * sum(k * f.r(_sub(z, zp)) for (z, zp), k in K.items())
    elif q == 2:
        # τ_{x+b} = ½ φ_{x+b}·φ_{x+b}: pair form G(b,b) = ¼ lapq Σ K w w
        c = 0.25 * lapq
        G0 = c * sum(k * f.r(_sub(z, zp)) for (z, zp), k in K.items())
        M2 = sum(k * _m2(f, z, zp) for (z, zp), k in K.items())
        first = c * sum(k * f.r(_sub(z, zp)) * (z[0] + zp[0]) for (z, zp), k in K.items())
        out += _quad_form_loc(G0, 2.0 * c * M2, c * M2, first)
    else:
        out[TAU[q - 1]] += 0.5 * lapq * sum(k * f.r(_sub(z, zp)) for (z, zp), k in K.items())
    return 0.5 * out


def _sub(a, b):
    return tuple(x - y for x, y in zip(a, b))


def _m2(f: ScaleFunctionals, z, zp) -> float:
    """Σ_b w(b-z) w(b-z') b_1²."""
    d = _sub(z, zp)
    return f.r2(d) + 2.0 * z[0] * f.r1(d) + z[0] ** 2 * f.r(d)


def _tau_slot_gamma(p: int, f: ScaleFunctionals, n) -> np.ndarray:
    """½ Loc_x F_w(τ_x^p, Γ)."""
    out = np.zeros(6)
    lapp = ma.single_site_laplacian_power(p, n)
    # k = 1: p τ^{p-1} φ_x·Σ_b h(b) φ_{x+b};  Σ h = 0, Σ h b_1² = -dw_star
    hsum = 0.0  # Σ_b (-Δw)(b) vanishes identically for finite-range w
    if p == 1:
        out += _quad_form_loc(hsum, -f.dw_star, 0.0)
    else:
        out[TAU[p]] += p * 2.0 * hsum
    # k = 2: ½ E_w Δ_φ τ^p
    out[TAU[p - 1] if p > 1 else I0] += 0.5 * f.energy * lapp
    return 0.5 * out


def _kform_slot_gamma(K: dict, f: ScaleFunctionals, n) -> np.ndarray:
    """½ Loc_x F_w(M^K_x, Γ)."""
    out = np.zeros(6)
    # k = 1: pair form G(z', b) = K(z,z') h(b - z) has G0 = S = T = 0 (Σh = 0, Σ h b_1² ΣK = 0)
    Ksum = sum(K.values())
    S = -f.dw_star * Ksum
    out += _quad_form_loc(0.0, S, 0.0)
    # k = 2: ½ n Σ K(z,z') RH(z - z')
    out[I0] += 0.5 * n * sum(k * f.rh(_sub(z, zp)) for (z, zp), k in K.items())
    return 0.5 * out


def _tau_tau(p: int, q: int, f: ScaleFunctionals, table) -> np.ndarray:
    out = np.zeros(6)
    for k in range(1, 2 * min(p, q) + 1):
        poly = table.poly(p, q, k)
        if not poly:
            continue
        wt = ma.Weight(f.w[k], f.wstar[k])
        out += ma.loc_poly(poly, wt) / 2.0 ** (p + q)
    return 0.5 * out


@lru_cache(maxsize=8)
def _float_table(n):
    t = ma.contraction_coefficients(int(n))
    ent = {key: {m: float(c) for m, c in poly.items()} for key, poly in t.entries.items()}
    return ma.ContractionTable(ent, n)


def kappa_table(f: ScaleFunctionals, n: int, L: int = 2, reading: str = "honest") -> KappaTable:
    """κ_i^{pq} at scale f.j.

    reading='total' is a diagnostic: τ_Δ inputs are replaced by the total
    Laplacian -½Δτ, and outputs are taken modulo total derivatives, so the
    τ_∇∇ row is folded into τ_Δ (globally Σ_x τ_∇∇ = Σ_x τ_Δ)."""
    table = _float_table(n)
    kap = np.zeros((6, 6, 6))
    kD = _kform("TOT" if reading == "total" else "D")
    kN = _kform("NN")
    kforms = {INN: kN, ID: kD}
    for p in (1, 2, 3):
        for q in (1, 2, 3):
            kap[:, TAU[p], TAU[q]] = _tau_tau(p, q, f, table)
    for pk, K in kforms.items():
        for q in (1, 2, 3):
            kap[:, pk, TAU[q]] = _kform_slot_tau(K, q, f, n)
    for qk, Kq in kforms.items():
        total_zero = reading == "total" and qk == ID
        for p in (1, 2, 3):
            kap[:, TAU[p], qk] = 0.0 if total_zero else _tau_slot_gamma(p, f, n)
        for pk, K in kforms.items():
            kap[:, pk, qk] = 0.0 if total_zero else _kform_slot_gamma(K, f, n)
    if reading == "total":
        kap[ID] += kap[INN]
        kap[INN] = 0.0
    return KappaTable(f.j, L, n, kap, reading)


# ---------------------------------------------------------------------------
# bounded set & triangularity

def _in_bd(i, p, q) -> bool:
    lab = ma.LABELS
    I, P, Qv = lab[i], lab[p], lab[q]
    if "0" in (I, P, Qv) or "NN" in (I, P, Qv):
        return False
    if "D" in (P, Qv):
        return True                                # κ̂_i^{Δp}, κ̂_i^{pΔ}
    if I == "D":
        return not (P == "3" and Qv == "3")        # κ̂_Δ^{pq}
    ii, pp, qq = int(I), int(P), int(Qv)
    if pp + qq < 3 + ii:
        return True
    return ii == 1 and {pp, qq} == {1, 3}


BOUNDED = np.array([[[_in_bd(i, p, q) for q in range(6)] for p in range(6)] for i in range(6)])
DIVERGENT = ~BOUNDED


def bounded_set() -> list:
    return [(ma.LABELS[i], ma.LABELS[p], ma.LABELS[q]) for i, p, q in zip(*np.nonzero(BOUNDED))]


def _zero_claims() -> list:
    """Entries the triangularity argument asserts are exactly zero."""
    out = [("1", "1", "3"), ("1", "3", "1")]
    core = ("1", "2", "3", "D")
    for i in core:
        out.append((i, "D", "D"))
        for p in ("1", "2", "3"):
            out.append((i, p, "D"))
        for q in ("2", "3"):
            out.append((i, "D", q))
    out.append(("1", "D", "1"))
    return out


ZERO_CLAIMS = _zero_claims()


@dataclass
class TriangularityReport:
    n: int
    L: int
    js: list
    zero_max: dict          # (i,p,q) -> max |κ̂| relative to row scale
    bounded_slope: dict     # (i,p,q) -> (fitted exponent of |κ̂| in log_L, max |κ̂|)
    divergent_slope: dict   # (i,p,q) -> (measured exponent in log_L of |κ̂|, bound exponent)
    zero_tol: float = 1e-10
    slope_tol: float = 0.05

    @property
    def zero_ok(self) -> bool:
        return all(v <= self.zero_tol for v in self.zero_max.values())

    @property
    def bounded_ok(self) -> bool:
        # growth test: entries that settle towards their limit from above have
        # negative slopes at finite j and are not a growth trend
        return all(s <= self.slope_tol for s, _ in self.bounded_slope.values())

    @property
    def passed(self) -> bool:
        return self.zero_ok and self.bounded_ok

    def failures(self) -> list:
        out = [("zero", k, v) for k, v in self.zero_max.items() if v > self.zero_tol]
        out += [("bounded", k, s) for k, (s, _) in self.bounded_slope.items() if s > self.slope_tol]
        return out

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "L": self.L, "js": self.js,
                           "zero_max": {"".join(k): v for k, v in self.zero_max.items()},
                           "bounded": {"".join(k): v for k, v in self.bounded_slope.items()},
                           "divergent": {"".join(k): v for k, v in self.divergent_slope.items()}}, indent=1)


def _fit_slope(js, vals, L, floor: float = 0.0):
    """Least-squares exponent of |vals| in log_L; entries at or below `floor`
    (roundoff) are dropped, and an all-roundoff sequence has slope 0."""
    v = np.abs(np.asarray(vals, float))
    keep = v > floor
    if keep.sum() < 2:
        return 0.0 if not keep.any() else math.inf
    js = np.asarray(js, float)[keep]
    return float(np.polyfit(js, np.log(v[keep]) / math.log(L), 1)[0])


def triangularity_report(tables: list, fit_from: int | None = None) -> TriangularityReport:
    """tables: KappaTable list over consecutive scales (j >= 1)."""
    tabs = [t for t in tables if t.j >= 1]
    js = [t.j for t in tabs]
    L, n = tabs[0].L, tabs[0].n
    hats = np.array([t.hat for t in tabs])
    fit_from = fit_from if fit_from is not None else js[len(js) // 2]
    sel = [k for k, j in enumerate(js) if j >= fit_from]
    zero = {}
    for (i, p, q) in ZERO_CLAIMS:
        ii, pp, qq = ma.IDX[i], ma.IDX[p], ma.IDX[q]
        rowscale = np.max(np.abs(hats[:, ii, 1:4, 1:4]), axis=(1, 2))
        rowscale = np.where(rowscale > 0, rowscale, 1.0)
        zero[(i, p, q)] = float(np.max(np.abs(hats[:, ii, pp, qq]) / rowscale))
    zset = set(ZERO_CLAIMS)
    bnd, div = {}, {}
    core = [ma.IDX[c] for c in ("1", "2", "3", "D")]
    for i, p, q in itertools.product(core, repeat=3):
        key = (ma.LABELS[i], ma.LABELS[p], ma.LABELS[q])
        seq = hats[sel, i, p, q]
        if BOUNDED[i, p, q]:
            if key in zset:
                continue
            floor = 1e-12 * float(np.max(np.abs(hats[:, i, 1:4, 1:4])))
            if np.all(np.abs(hats[:, i, p, q]) <= floor):
                continue
            bnd[key] = (_fit_slope([js[k] for k in sel], seq, L, floor), float(np.max(np.abs(hats[:, i, p, q]))))
        else:
            bound = 3 + DIM[i] - DIM[p] - DIM[q]
            raw = np.array([tabs[k].kappa[i, p, q] for k in sel])
            div[key] = (_fit_slope([js[k] for k in sel], raw, L), int(bound))
    return TriangularityReport(n, L, js, zero, bnd, div)


# ---------------------------------------------------------------------------
# PT map

def _quad(K: np.ndarray, U, V=None) -> np.ndarray:
    U = np.asarray(U, float)
    V = U if V is None else np.asarray(V, float)
    return np.einsum("ipq,p,q->i", K, U, V)


@dataclass
class ScaleStep:
    """Data for the step j -> j+1: Wick matrix of C_{j+1} and κ at scales j and j+1."""
    j: int
    L: int
    n: int
    c: float            # C_{j+1;0,0}
    cdelta: float       # (ΔC_{j+1})_{0,0}
    kappa: np.ndarray   # scale j
    kappa_next: np.ndarray

    @property
    def M(self) -> np.ndarray:
        return ma.wick_matrix(self.c, self.cdelta, self.n)


def P_alt(step: ScaleStep, U) -> np.ndarray:
    """P_j(U) = Q_{j+1}(e^L U, e^L U) - e^L Q_j(U, U)."""
    M = step.M
    MU = M @ np.asarray(U, float)
    return _quad(step.kappa_next, MU) - M @ _quad(step.kappa, U)


def pt_step(step: ScaleStep, U) -> np.ndarray:
    U = np.asarray(U, float)
    return step.M @ U - P_alt(step, U)


def transform_T(kappa: np.ndarray, U) -> np.ndarray:
    return np.asarray(U, float) + _quad(kappa * BOUNDED, U)


def inverse_T(kappa: np.ndarray, U, order: int = 2):
    """Inverse of T to second order, with the measured cubic defect T(T⁻¹U) - U."""
    U = np.asarray(U, float)
    V = U - _quad(kappa * BOUNDED, U)
    if order > 2:
        for _ in range(order - 2):
            V = U - _quad(kappa * BOUNDED, V)
    defect = transform_T(kappa, V) - U
    return V, defect


def approx_step(step: ScaleStep, U) -> np.ndarray:
    """Ū_+ = e^L Ū - [Q_+^div(e^L Ū, e^L Ū) - e^L Q^div(Ū, Ū)]."""
    M = step.M
    U = np.asarray(U, float)
    MU = M @ U
    return MU - (_quad(step.kappa_next * DIVERGENT, MU) - M @ _quad(step.kappa * DIVERGENT, U))


def approx_quadratic(step: ScaleStep) -> np.ndarray:
    """H[i] with approx_step(U) = M U - U·H[i]·U (H symmetric in p, q)."""
    M = step.M
    Kp = step.kappa_next * DIVERGENT
    Kd = step.kappa * DIVERGENT
    H = np.einsum("ipq,pa,qb->iab", Kp, M, M) - np.einsum("ik,kab->iab", M, Kd)
    return 0.5 * (H + H.transpose(0, 2, 1))


def conjugated_pt(step: ScaleStep, U) -> np.ndarray:
    """T_{+} ∘ PT ∘ T⁻¹ (second-order inverse)."""
    V, _ = inverse_T(step.kappa, U, order=4)
    return transform_T(step.kappa_next, pt_step(step, V))


# ---------------------------------------------------------------------------
# β coefficients of the triangular flow

BETA_NAMES = ("b3_33", "bD_33", "b2_3", "b2_23", "b2_33", "b1_2", "b1_3", "b1_22", "b1_23", "b1_33")


@dataclass
class BetaRow:
    """Coefficients of the dimensionless triangular flow at scale j, signs as in

        μ3+ = μ3 - b3_33 μ3²,   μΔ+ = μΔ - bD_33 μ3²,
        μ2+ = L(μ2 + b2_3 μ3 - b2_23 μ2 μ3 - b2_33 μ3²),
        μ1+ = L²(μ1 + b1_2 μ2 + b1_3 μ3 - b1_22 μ2² - b1_23 μ2 μ3 - b1_33 μ3²)."""
    j: int
    b3_33: float
    bD_33: float
    b2_3: float
    b2_23: float
    b2_33: float
    b1_2: float
    b1_3: float
    b1_22: float
    b1_23: float
    b1_33: float
    residual: dict = field(default_factory=dict)   # other quadratic entries (must be 0)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in BETA_NAMES])


def beta_row(step: ScaleStep) -> BetaRow:
    L, j = float(step.L), step.j
    M = step.M
    alpha = M * L ** (j * (DIM[None, :] - DIM[:, None]))
    H = approx_quadratic(step)
    Hh = H * L ** (j * (-3 - DIM[:, None, None] + DIM[None, :, None] + DIM[None, None, :]))

    def q(i, p, r):
        return Hh[i, p, r] if p == r else Hh[i, p, r] + Hh[i, r, p]

    used = {(I3, I3, I3), (ID, I3, I3), (I2, I2, I3), (I2, I3, I3), (I1, I2, I2), (I1, I2, I3), (I1, I3, I3)}
    resid = {}
    for i in (I1, I2, I3, ID):
        for p in (I1, I2, I3, ID):
            for r in (I1, I2, I3, ID):
                if r < p or (i, p, r) in used:
                    continue
                v = q(i, p, r)
                if v != 0.0:
                    resid[(ma.LABELS[i], ma.LABELS[p], ma.LABELS[r])] = float(v)
    return BetaRow(j, q(I3, I3, I3), q(ID, I3, I3), alpha[I2, I3], q(I2, I2, I3), q(I2, I3, I3),
                   alpha[I1, I2], alpha[I1, I3], q(I1, I2, I2), q(I1, I2, I3), q(I1, I3, I3), resid)


def p2(n) -> float:
    return 2.0 * (n + 4) / (3.0 * n + 22)


def b_const(n) -> float:
    return 18.0 * n + 132.0


def approx_flow_step(mu, beta: BetaRow, L: int = 2, p2_value: float | None = None):
    """One step of the triangular flow on (μ1, μ2, μ3, μΔ).

    If p2_value is given the μ2μ3 coefficient is p2·b3_33 (modified flow)."""
    m1, m2, m3, mD = (float(x) for x in mu)
    b23 = beta.b2_23 if p2_value is None else p2_value * beta.b3_33
    m3n = m3 - beta.b3_33 * m3 ** 2
    mDn = mD - beta.bD_33 * m3 ** 2
    m2n = L * (m2 + beta.b2_3 * m3 - b23 * m2 * m3 - beta.b2_33 * m3 ** 2)
    m1n = L ** 2 * (m1 + beta.b1_2 * m2 + beta.b1_3 * m3 - beta.b1_22 * m2 ** 2
                    - beta.b1_23 * m2 * m3 - beta.b1_33 * m3 ** 2)
    return np.array([m1n, m2n, m3n, mDn])


def to_reduced(U, j: int, L: int = 2) -> np.ndarray:
    """(ν, g, a, z) -> (μ1, μ2, μ3, μΔ) = (L^{2j}ν, L^j g, a, z)."""
    U = np.asarray(U, float)
    return np.array([L ** (2 * j) * U[I1], L ** j * U[I2], U[I3], U[ID]])


def from_reduced(mu, j: int, L: int = 2) -> np.ndarray:
    U = np.zeros(6)
    U[I1] = mu[0] / L ** (2 * j)
    U[I2] = mu[1] / L ** j
    U[I3] = mu[2]
    U[ID] = mu[3]
    return U


# ---------------------------------------------------------------------------
# assembling steps from a decomposition

def functionals_from_decomposition(dec, j: int) -> ScaleFunctionals:
    if j == 0:
        return scale_functionals(None, 0)
    return scale_functionals(dec.wj(j), j)


def kappa_tables(dec, n: int, jmax: int | None = None, reading: str = "honest", functionals=None) -> list:
    jmax = dec.ctx.j_max if jmax is None else jmax
    fs = functionals or [functionals_from_decomposition(dec, j) for j in range(jmax + 1)]
    return [kappa_table(f, n, dec.ctx.L, reading) for f in fs[:jmax + 1]]


def scale_steps(dec, n: int, tables: list) -> list:
    """Steps j -> j+1 for j = 0..len(tables)-2."""
    out = []
    for j in range(len(tables) - 1):
        s = dec.slices[j]
        c = float(s.kernel[0, 0, 0])
        cd = 6.0 * float(s.kernel[1, 0, 0]) - 6.0 * c
        out.append(ScaleStep(j, dec.ctx.L, n, c, cd, tables[j].kappa, tables[j + 1].kappa))
    return out


def direct_betas(dec, n: int, functionals=None) -> list:
    tabs = kappa_tables(dec, n, functionals=functionals)
    return [beta_row(s) for s in scale_steps(dec, n, tabs)]


# ---------------------------------------------------------------------------
# independent route to P through the defining formula (τ-power span only)

def _mixed_moments(wa: np.ndarray | None, cb: np.ndarray, kmax: int = 6):
    """Σ_y w^k C^l and Σ_y y_1² w^k C^l for k + l <= kmax."""
    R = max(cb.shape[0], 0 if wa is None else wa.shape[0]) - 1
    cb = pad_octant(cb, R)
    wa = np.zeros_like(cb) if wa is None else pad_octant(wa, R)
    mult = multiplicity(R)
    X2 = octant_coords(R)[0] ** 2
    m0, m2 = {}, {}
    for k in range(kmax + 1):
        for l in range(kmax + 1 - k):
            if k + l == 0:
                continue
            arr = mult * wa ** k * cb ** l
            m0[(k, l)] = float(arr.sum())
            m2[(k, l)] = float((arr * X2).sum())
    return m0, m2


def _bilocal_wick(poly_by_kl: dict, c: float, n) -> dict:
    """Apply exp(½c(Δ_x+Δ_y) + C_xy Dop) to {(k, l): poly} (w^k C^l poly)."""
    out = {key: dict(p) for key, p in poly_by_kl.items()}
    cur = {key: dict(p) for key, p in poly_by_kl.items()}
    m = 0
    while cur:
        m += 1
        nxt = {}
        for (k, l), p in cur.items():
            a = ma.pscale(ma.padd(ma.lap_x(p, n), ma.lap_y(p, n)), 0.5 * c)
            if a:
                nxt[(k, l)] = ma.padd(nxt.get((k, l), {}), a)
            b = ma.dop(p, n)
            if b:
                nxt[(k, l + 1)] = ma.padd(nxt.get((k, l + 1), {}), b)
        cur = {key: ma.pscale(p, 1.0 / m) for key, p in nxt.items() if p}
        for key, p in cur.items():
            out[key] = ma.padd(out.get(key, {}), p)
    return out


def _local_poly(U) -> dict:
    """τ-power part of U as a polynomial in A (x-slot)."""
    return {(p, 0, 0): float(U[TAU[p]]) / 2.0 ** p for p in (1, 2, 3) if U[TAU[p]] != 0.0}


def _as_y(P: dict) -> dict:
    return {(0, a, 0): c for (a, _, _), c in P.items()}


def P_defining(step: ScaleStep, U, w_oct: np.ndarray | None, c_oct: np.ndarray) -> np.ndarray:
    """Loc[e^{L_C} W_j(U, x) + ½ F_C(e^{L_C}U_x, e^{L_C}U(Λ))] for U in span(τ, τ², τ³).

    Independent of the κ tables: bilocal Wick action and Loc with mixed moments."""
    U = np.asarray(U, float)
    if np.any(U[[I0, INN, ID]] != 0):
        raise ValueError("defining-formula check is restricted to the τ-power span")
    n = step.n
    m0, m2 = _mixed_moments(w_oct, c_oct)
    Px = _local_poly(U)
    # F_w(U_x, U_y) as {(k, 0): poly}
    F = {}
    for k, poly in ma.contraction_terms(Px, _as_y(Px), float(n), kmax=6).items():
        F[(k, 0)] = poly
    EF = _bilocal_wick(F, step.c, float(n))
    term1 = np.zeros(6)
    for (k, l), poly in EF.items():
        term1 += ma.loc_poly(poly, ma.Weight(m0[(k, l)], m2[(k, l)]))
    # e^L Loc F_w(U, U) through the matrix on the local span
    locF = np.zeros(6)
    for (k, _), poly in F.items():
        locF += ma.loc_poly(poly, ma.Weight(m0[(k, 0)], m2[(k, 0)]))
    term2 = step.M @ locF
    # ½ F_C(e^L U, e^L U)
    MU = step.M @ U
    PM = _local_poly(MU)
    term3 = np.zeros(6)
    for l, poly in ma.contraction_terms(PM, _as_y(PM), float(n), kmax=6).items():
        term3 += ma.loc_poly(poly, ma.Weight(m0[(0, l)], m2[(0, l)]))
    return 0.5 * (term1 - term2 + term3)
