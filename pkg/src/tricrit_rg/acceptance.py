"""The desk-scale acceptance suite.

Each check returns a CheckResult with the measured value next to its target
and tolerance; `run` evaluates any subset.  Checks share decompositions and
coefficient tables through the on-disk cache.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import covariance as cv
from . import flow, lattice, observables, polymer_mc, ptmap, tricrit
from . import moment_algebra as ma
from .lattice import ScaleContext

DEFAULTS = dict(L=2, a0=0.02, depth=2000, j_direct=9, j_exact=7, samples=100_000, seed=0)


@dataclass
class CheckResult:
    id: int
    name: str
    target: str
    measured: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"[{flag}] criterion {self.id:>2} {self.name}: measured {self.measured:.4g} "
                f"(target {self.target}, tolerance {self.tolerance:g}) [{self.seconds:.1f}s]")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


class _Ctx:
    """Lazily built shared inputs."""

    def __init__(self, cache_dir, log=None, **kw):
        self.cache_dir = cv.default_cache_dir() if cache_dir == "default" else cache_dir
        self.log = log
        self.opts = dict(DEFAULTS, **{k: v for k, v in kw.items() if v is not None})
        self._tables = {}
        self._decs = {}

    def dec(self, m2: float, j: int):
        key = (float(m2), j)
        if key not in self._decs:
            ctx = ScaleContext(L=self.opts["L"], m2=m2, j_max=j)
            self._decs[key] = cv.build(ctx, cache_dir=self.cache_dir, log=self.log)
        return self._decs[key]

    def table(self, n: int, m2: float = 0.0):
        key = (n, float(m2))
        if key not in self._tables:
            o = self.opts
            self._tables[key] = cv.beta_table(o["L"], n, m2, o["depth"], o["j_direct"],
                                              cache_dir=self.cache_dir, log=self.log)
        return self._tables[key]


# ---------------------------------------------------------------------------
# Gauss-Hermite oracle for single-site Gaussian convolution

def _gh(order: int):
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / math.sqrt(2.0 * math.pi)


def gh_tau_image(p: int, c: float, n: int, order: int = 12) -> np.ndarray:
    """Coefficients (in powers of τ = |φ|²/2) of E[τ(φ + ξ)^p], ξ ~ N(0, c·I_n), by quadrature."""
    x, w = _gh(order)
    nodes = np.array(list(itertools.product(x, repeat=n))) * math.sqrt(c)
    wts = np.prod(np.array(list(itertools.product(w, repeat=n))), axis=1)
    taus = 0.5 * np.arange(1, p + 2, dtype=float)
    vals = []
    for t in taus:
        phi = np.zeros(n)
        phi[0] = math.sqrt(2.0 * t)
        vals.append(float(np.dot(wts, (0.5 * ((nodes + phi) ** 2).sum(axis=1)) ** p)))
    V = np.vander(taus, p + 1, increasing=True)
    return np.linalg.solve(V, np.array(vals))


def gh_gradient_constant(kind: str, c: float, cdelta: float, n: int, order: int = 8, seed: int = 1) -> float:
    """E[M(φ + ξ)] - M(φ) for M = τ_∇∇ ('NN') or τ_Δ ('D') at a random field φ on the stencil.

    Only pairs (0, e) and (e, e) appear, so every term is a two-site Gaussian
    integral with covariance [[c, c_e], [c_e, c]], c_e = c + cΔ/6."""
    K = ptmap._kform(kind)
    ce = c + cdelta / 6.0
    chol = np.linalg.cholesky(np.array([[c, ce], [ce, c]]))
    x, w = _gh(order)
    z = np.array(list(itertools.product(x, x))).T
    wz = np.outer(w, w).ravel()
    xi = chol @ z
    rng = np.random.default_rng(seed)
    phi = {s: rng.normal(size=n) for s in ptmap.STENCIL}
    tot = 0.0
    for (s, sp), k in K.items():
        for a in range(n):
            if s == sp:
                val = np.dot(wz, (phi[s][a] + xi[0]) ** 2)
            else:
                val = np.dot(wz, (phi[s][a] + xi[0]) * (phi[sp][a] + xi[1]))
            tot += 0.5 * k * (val - phi[s][a] * phi[sp][a])
    return float(tot)


def gh_wick_matrix(c: float, cdelta: float, n: int) -> np.ndarray:
    """The Wick matrix assembled column by column from the quadratures (n >= 1)."""
    M = np.eye(ma.N_BASIS)
    for p in (1, 2, 3):
        coef = gh_tau_image(p, c, n)
        for k in range(p):
            M[k, p] = coef[k]
    M[0, 4] = gh_gradient_constant("NN", c, cdelta, n)
    M[0, 5] = gh_gradient_constant("D", c, cdelta, n)
    return M


def gh_wick_matrix_any_n(c: float, cdelta: float, n: int) -> np.ndarray:
    """n = 0 by exact cubic interpolation in n through the quadratures at n = 1..4."""
    if n >= 1:
        return gh_wick_matrix(c, cdelta, n)
    ns = np.arange(1, 5, dtype=float)
    Ms = np.array([gh_wick_matrix(c, cdelta, int(k)) for k in ns])
    out = np.zeros_like(Ms[0])
    for i, ni in enumerate(ns):
        li = np.prod([(n - nk) / (ni - nk) for nk in ns if nk != ni])
        out += li * Ms[i]
    return out


# ---------------------------------------------------------------------------
# checks

def _rel(a, b):
    return abs(a - b) / abs(b) if b != 0 else abs(a)


def check_1(ctx: _Ctx) -> CheckResult:
    J = ctx.opts["j_exact"]
    worst, det = 0.0, {}
    range_ok = True
    for m2 in (0.0, 0.01, 0.1):
        dec = ctx.dec(m2, J)
        for s in dec.slices:
            X = cv.octant_coords(s.kernel.shape[0] - 1)
            r2 = sum(x.astype(np.int64) ** 2 for x in X)
            outside = 4 * r2 >= s.L ** (2 * s.j)
            range_ok &= bool(np.all(s.kernel[outside] == 0.0))
        total = dec.partial_sum() + dec.tail()
        G = lattice.green_function(m2)
        err = _rel(total, G)
        worst = max(worst, err)
        det[f"m2={m2}"] = dict(sum_plus_tail=total, green=G, rel_error=err,
                               geometric_tail_rel_error=_rel(dec.partial_sum() + dec.geometric_tail(), G))
    det["finite_range_bitwise"] = range_ok
    return CheckResult(1, "decomposition exactness", "Σ_j C_j;00 + tail = C_00", worst, 1e-6,
                       range_ok and worst <= 1e-6, det)


def check_2(ctx: _Ctx) -> CheckResult:
    dec = ctx.dec(0.0, ctx.opts["j_exact"])
    pairs = [(float(dec.moments.c[j]), float(dec.moments.cdelta[j])) for j in (1, 3, 6)] + [(0.7, -1.3)]
    worst = 0.0
    for n in (0, 1, 2, 3):
        for c, cd in pairs:
            A = ma.wick_matrix(c, cd, n)
            B = gh_wick_matrix_any_n(c, cd, n)
            # entries vanishing identically are compared on the scale of the matrix
            floor = np.abs(B).max()
            scale = np.where(np.abs(B) > 1e-12 * floor, np.abs(B), floor)
            err = np.abs(A - B) / scale
            worst = max(worst, float(err.max()))
    return CheckResult(2, "Wick matrix vs Gauss-Hermite", "entrywise agreement", worst, 1e-8, worst <= 1e-8,
                       dict(pairs=pairs))


def check_3(ctx: _Ctx) -> CheckResult:
    dec = ctx.dec(0.0, ctx.opts["j_direct"])
    rows = cv.direct_beta_rows(dec, [0, 1, 2, 3], ctx.cache_dir, ctx.log)
    d3 = dec.moments.delta_w3
    worst, det = 0.0, {}
    for n, rs in rows.items():
        e = 0.0
        for b in rs:
            if d3[b.j] == 0:
                continue
            e = max(e, _rel(b.b3_33, (18 * n + 132) * d3[b.j]), _rel(b.b2_23, (12 * n + 48) * d3[b.j]),
                    _rel(b.b1_22, (2 * n + 4) * d3[b.j]), _rel(b.b2_23 / b.b3_33, ptmap.p2(n)))
        det[f"n={n}"] = e
        worst = max(worst, e)
    return CheckResult(3, "combinatorial identities", "β ∝ δ[w3], p2 ratio", worst, 1e-8, worst <= 1e-8, det)


def check_4(ctx: _Ctx) -> CheckResult:
    dec = ctx.dec(0.0, ctx.opts["j_direct"])
    fs = cv.cached_functionals(dec, ctx.cache_dir, ctx.log)
    det, zmax, smax, ok = {}, 0.0, 0.0, True
    for n in (0, 1, 2, 3):
        rep = ptmap.triangularity_report(ptmap.kappa_tables(dec, n, functionals=fs))
        z = max(rep.zero_max.values())
        s = max((abs(v) for v, _ in rep.bounded_slope.values()), default=0.0)
        zmax, smax = max(zmax, z), max(smax, s)
        ok &= rep.passed
        alt = ptmap.triangularity_report(ptmap.kappa_tables(dec, n, reading="total", functionals=fs))
        det[f"n={n}"] = dict(zero_max=z, worst_bounded_slope=s, n_failures=len(rep.failures()),
                             first_failures=[f"{k}:{''.join(e)}={v:.3g}" for k, e, v in rep.failures()[:4]],
                             total_derivative_reading_passes=alt.passed)
    return CheckResult(4, "triangularity", "vanishing entries ≤ 1e-10, bounded slopes ≤ 0.05", zmax, 1e-10,
                       bool(ok), dict(det, worst_bounded_slope=smax))


def check_5(ctx: _Ctx) -> CheckResult:
    a0, D = ctx.opts["a0"], ctx.opts["depth"]
    worst, det = 0.0, {}
    for n in (0, 1):
        tab = ctx.table(n)
        lam3 = tab["b3_33"][-1] / ptmap.b_const(n)
        mu3 = flow.a_flow(a0, tab, D)
        v = abs(D * ptmap.b_const(n) * lam3 * mu3[D] - 1.0)
        det[f"n={n}"] = v
        worst = max(worst, v)
    return CheckResult(5, "asymptotic freedom", "j·(18n+132)·λ3·μ3,j → 1", worst, 0.1, worst <= 0.1,
                       dict(det, a0=a0, j=D))


def check_6(ctx: _Ctx) -> CheckResult:
    a0, jmax = ctx.opts["a0"], 500
    worst_ratio, det = 0.0, {}
    for n in (0, 1):
        tab = ctx.table(n)
        mu3 = flow.a_flow(a0, tab, jmax + 1)
        P = flow.pi_log(mu3, tab)
        p = ptmap.p2(n)
        lm = np.log(mu3)
        w = 0.0
        for i in range(jmax + 1):
            js = np.arange(i, jmax + 1)
            pi = P[js + 1] - P[i]
            law = p * (lm[js + 1] - lm[i])
            r = np.exp(pi - law)
            ci = float(np.exp(np.mean(np.log(r))))
            dev = float(np.max(np.abs(r / ci - 1.0)))
            w = max(w, dev / (3.0 * mu3[i]))
        det[f"n={n}"] = w
        worst_ratio = max(worst_ratio, w)
    return CheckResult(6, "π-product law", "max dev / (3 μ3,i) ≤ 1", worst_ratio, 1.0, worst_ratio <= 1.0,
                       dict(det, a0=a0))


def check_7(ctx: _Ctx) -> CheckResult:
    dec = ctx.dec(0.0, ctx.opts["j_exact"])
    C00 = dec.partial_sum() + dec.tail()
    grid = 0.02 * 2.0 ** -np.arange(6)
    det, ok, worst = {}, True, 0.0
    for n in (0, 1):
        rep = tricrit.asymptotic_slopes(grid, ctx.table(n), C00, ctx.opts["depth"])
        det[f"n={n}"] = dict(g_slope=rep.g_slope, g_target=rep.target_g, g_rel=rep.g_rel_error,
                             nu_slope=rep.nu_slope, nu_target=rep.target_nu, nu_rel=rep.nu_rel_error,
                             flagged=rep.flagged)
        ok &= rep.g_rel_error <= 0.05 and rep.nu_rel_error <= 0.10
        worst = max(worst, rep.g_rel_error / 0.05, rep.nu_rel_error / 0.10)
    return CheckResult(7, "tricritical slopes", "g/a, ν/a limits (5%, 10%)", worst, 1.0, bool(ok), det)


def check_8(ctx: _Ctx) -> CheckResult:
    radii = (8, 16, 32, 64)
    det, Cmax, mono_ok = {}, 0.0, True
    for n in (0, 1):
        tab = ctx.table(n)
        for a0 in (0.005, 0.02):
            tr = flow.critical_trajectory(a0, tab, ctx.opts["depth"])
            devs, errs, amps = [], [], []
            for r in radii:
                rep = observables.two_point(tr, tab, (0, 0, 0), (r, 0, 0), z0_star=0.0)
                amp = 4 * math.pi * r * rep.q_inf
                # error bar: lattice correction of the free Green function plus the λ normalisation
                err = abs(4 * math.pi * r * lattice.green_function(0.0, (r, 0, 0)) - 1.0) \
                    + abs(1.0 - rep.lam_inf ** 2)
                amps.append(amp)
                devs.append(abs(amp - 1.0))
                errs.append(err)
            C = max(d * math.log(r) for d, r in zip(devs, radii))
            mono = all(devs[k] <= devs[i] + errs[i] + errs[k]
                       for i in range(len(radii)) for k in range(i + 1, len(radii)))
            det[f"n={n},a0={a0}"] = dict(four_pi_r_q=amps, error_bars=errs, fitted_C=C, monotone=mono)
            Cmax = max(Cmax, C)
            mono_ok &= mono
    return CheckResult(8, "two-point amplitude", "|4π r q_∞ - 1| ≤ C/log r, C ≤ 1; monotone", Cmax, 1.0,
                       Cmax <= 1.0 and mono_ok, det)


def check_9(ctx: _Ctx) -> CheckResult:
    tab = ctx.table(1)
    D = 200
    tr = flow.critical_trajectory(ctx.opts["a0"], tab, D)
    dec = ctx.dec(0.0, ctx.opts["j_direct"])
    vals = observables.SliceValues(dec)
    a, b = (0, 0, 0), (11, 3, 0)
    jab = lattice.coalescence_scale(a, b, tab.L)
    lf = observables.lambda_flow(tr, tab, jab)
    frozen = bool(np.all(lf.lam[jab:] == lf.lam[jab]))
    qf = observables.q_flow(lf.frozen, lf.frozen, a, b, vals, D)
    q_zero = bool(np.all(qf.q[:jab + 1] == 0.0))
    free = flow.FlowTrajectory(tab.L, 1, 0.0, 0.0, np.zeros(D + 1), np.zeros(D + 1), np.zeros(D + 1),
                               np.zeros(D + 1), np.ones(D + 1))
    lf0 = observables.lambda_flow(free, tab, math.inf)
    lam_one = bool(np.all(lf0.lam == 1.0))
    N = dec.ctx.j_max + 4
    q0 = observables.q_flow(1.0, 1.0, a, b, vals, N)
    q_w = q0.q[N] == observables.w_ab(vals, a, b, N)
    ok = frozen and q_zero and lam_one and bool(q_w)
    return CheckResult(9, "observable flow structure", "exact freezing / zeros / free case", float(not ok), 0.0, ok,
                       dict(lambda_frozen=frozen, q_zero_below_jab=q_zero, lambda_one_free=lam_one,
                            q_equals_w_bitwise=bool(q_w), j_ab=jab))


def check_10(ctx: _Ctx) -> CheckResult:
    side, S, seed = 4, ctx.opts["samples"], ctx.opts["seed"]
    pts = [(0, 0, 0), (1, 0, 0), (2, 1, 0), (2, 2, 2)]
    worst, det = 0.0, {}
    for nu in (0.5, 1.0):
        for k, x in enumerate(pts):
            est = polymer_mc.estimate_c(side, 0.0, 0.0, nu, x, S, seed + k)
            exact = lattice.torus_resolvent(side, nu, x)
            z = abs(est.mean - exact) / est.stderr
            det[f"nu={nu},x={x}"] = dict(mean=est.mean, stderr=est.stderr, exact=exact, z=z)
            worst = max(worst, z)
    try:
        polymer_mc.estimate_c(side, 0.1, -0.2, 1.0, (0, 0, 0), min(S, 20_000), seed, check_envelope=True)
        env = True
    except polymer_mc.PolymerError:
        env = False
    det["envelope_samplewise"] = env
    return CheckResult(10, "polymer oracle", "free MC within 3σ of resolvent", worst, 3.0, worst <= 3.0 and env, det)


CHECKS = {1: check_1, 2: check_2, 3: check_3, 4: check_4, 5: check_5,
          6: check_6, 7: check_7, 8: check_8, 9: check_9, 10: check_10}


def run(ids=None, cache_dir="default", log=None, **opts) -> list:
    ctx = _Ctx(cache_dir, log, **opts)
    out = []
    for i in (ids or sorted(CHECKS)):
        t = time.time()
        res = CHECKS[int(i)](ctx)
        res.seconds = time.time() - t
        out.append(res)
    return out


def summary_json(results) -> str:
    return json.dumps([{"id": r.id, "target": r.target, "measured": r.measured, "tolerance": r.tolerance,
                        "pass": r.passed} for r in results], indent=1)
