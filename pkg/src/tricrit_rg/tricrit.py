"""Star variables, the tricritical point and its small-a asymptotics.

For the model with couplings (m², a) the flow's initial data are fixed by

    a0 = a (1 + z0)³,  g0 = g (1 + z0)²,  ν0 = (1 + z0) ν - m²,

with (g0, ν0, z0) the critical values from flow.tune.  Inverting
t(a0) = a0 / (1 + z0^c(m², a0))³ = a gives a0*, and then

    g* = g0^c(a0*) / (1 + z0*)²,   ν* = (ν0^c(a0*) + m²) / (1 + z0*).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import flow
from .covariance import BetaTable

DELTA1_CONFIG = 0.5 * flow.DELTA_CONFIG


class StarError(ValueError):
    pass


@dataclass
class StarTuple:
    m2: float
    a: float
    a0_star: float
    g0_star: float
    nu0_star: float
    z0_star: float
    g_star: float
    nu_star: float
    residual: float

    def constraints(self) -> np.ndarray:
        """Residuals of the three defining relations (all ≈ 0)."""
        zz = 1.0 + self.z0_star
        return np.array([self.a0_star - self.a * zz ** 3,
                         self.g0_star - self.g_star * zz ** 2,
                         self.nu0_star - (zz * self.nu_star - self.m2)])

    def as_dict(self) -> dict:
        return asdict(self)


def _z0(a0: float, table: BetaTable, depth=None, z0_func=None) -> float:
    if z0_func is not None:
        return z0_func(a0)
    mu3 = flow.a_flow(a0, table, depth)
    return float(flow.backward_mu_delta(mu3, table)[0][0])


def t_map(a0: float, table: BetaTable, depth=None, z0_func=None) -> float:
    return a0 / (1.0 + _z0(a0, table, depth, z0_func)) ** 3


def solve_star(a: float, table: BetaTable, depth: int | None = None, tol: float = 1e-12,
               delta1: float = DELTA1_CONFIG, z0_func=None, tune_func=None) -> StarTuple:
    """Bisection for t(m², a0*) = a, then the star couplings.

    z0_func / tune_func replace the flow (fixtures); tune_func(a0) -> (g0, ν0, z0)."""
    if not (0.0 < a < delta1):
        raise StarError(f"a = {a} outside (0, {delta1})")
    lo, hi = 0.5 * a, min(2.0 * a, flow.DELTA_CONFIG * (1 - 1e-12))
    f = lambda x: t_map(x, table, depth, z0_func) - a
    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise StarError(f"bracket failure: t - a = ({flo}, {fhi}) on [{lo}, {hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            lo = hi = mid
            break
        if fm < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    a0s = 0.5 * (lo + hi)
    res = abs(f(a0s))
    if res > tol:
        raise StarError(f"bisection residual {res} above {tol}")
    if tune_func is not None:
        g0, nu0, z0 = tune_func(a0s)
    else:
        g0, nu0, z0 = flow.tune(a0s, table, depth)
    m2 = table.m2 if table is not None else 0.0
    zz = 1.0 + z0
    return StarTuple(m2, a, a0s, g0, nu0, z0, g0 / zz ** 2, (nu0 + m2) / zz, res)


def tricritical_point(a: float, table: BetaTable, depth: int | None = None) -> tuple:
    """(g_c(a), ν_c(a)) = (g*(0, a), ν*(0, a))."""
    if table.m2 != 0:
        raise ValueError("the tricritical point lives at m2 = 0")
    st = solve_star(a, table, depth)
    return st.g_star, st.nu_star


def tricritical_curve(a: float, tables: dict, depth: int | None = None) -> list:
    """Rows (m2, g*, ν*) over {m2: table}."""
    rows = []
    for m2, tab in sorted(tables.items()):
        st = solve_star(a, tab, depth)
        rows.append((m2, st.g_star, st.nu_star))
    return rows


# ---------------------------------------------------------------------------
# slopes

def richardson_geometric(x, y, order: int = 1) -> np.ndarray:
    """Eliminate y = s + c1 x + c2 x² + ... on a geometric grid x_{i+1} = ρ x_i.

    Level k combines neighbours as (ρ^k e_i - e_{i+1})/(ρ^k - 1); the returned
    array holds the level-`order` estimates, smallest x first."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    idx = np.argsort(x)
    x, y = x[idx], y[idx]
    rho = x[1] / x[0]
    est = y.copy()
    for k in range(1, order + 1):
        est = (rho ** k * est[:-1] - est[1:]) / (rho ** k - 1.0)
    return est


@dataclass
class SlopeReport:
    n: int
    target_g: float
    target_nu: float
    g_slope: float
    nu_slope: float
    g_uncertainty: float
    nu_uncertainty: float
    raw_g: np.ndarray
    raw_nu: np.ndarray
    flagged: bool

    @property
    def g_rel_error(self) -> float:
        return abs(self.g_slope - self.target_g) / abs(self.target_g)

    @property
    def nu_rel_error(self) -> float:
        return abs(self.nu_slope - self.target_nu) / abs(self.target_nu)


def _extrapolate(x, y):
    est1 = richardson_geometric(x, y, 1)
    est2 = richardson_geometric(x, y, 2) if len(x) >= 3 else est1
    val = float(est1[0])    # smallest-x first-order estimate
    unc = float(abs(est1[0] - est2[0])) if len(est2) else float("nan")
    return val, unc


def asymptotic_slopes(a_grid, table: BetaTable, C00: float | None = None, depth: int | None = None,
                      kind: str = "flow", resid_threshold: float = 0.2) -> SlopeReport:
    """Limits of g/a and ν/a as a → 0.

    kind="flow": the ratios μ2,0/μ3,0 and μ1,0/μ3,0 of the tuned flow;
    kind="star": g_c(a)/a and ν_c(a)/a from tricritical_point."""
    from . import lattice
    a_grid = np.sort(np.asarray(a_grid, float))
    if len(a_grid) < 5:
        raise ValueError("need at least 5 grid points")
    ratios = a_grid[1:] / a_grid[:-1]
    if np.ptp(ratios) > 1e-9 * ratios.mean():
        raise ValueError("a-grid must be geometric")
    n = table.n
    C00 = lattice.green_function(table.m2, (0, 0, 0)) if C00 is None else C00
    gs, nus = [], []
    for a in a_grid:
        if kind == "flow":
            g, nu, _ = flow.tune(float(a), table, depth)
        elif kind == "star":
            g, nu = tricritical_point(float(a), table, depth)
        else:
            raise ValueError(kind)
        gs.append(g / a)
        nus.append(nu / a)
    gs, nus = np.array(gs), np.array(nus)
    gv, gu = _extrapolate(a_grid, gs)
    nv, nu_u = _extrapolate(a_grid, nus)
    # non-linear regime: correction (raw - limit) should scale ∝ a across the grid
    flagged = False
    for raw, lim in ((gs, gv), (nus, nv)):
        corr = raw - lim
        if np.all(corr != 0):
            slope = np.polyfit(np.log(a_grid), np.log(np.abs(corr)), 1)[0]
            flagged |= abs(slope - 1.0) > resid_threshold
    return SlopeReport(n, -1.5 * (n + 4) * C00, 0.75 * (n + 4) * (n + 2) * C00 ** 2,
                       gv, nv, gu, nu_u, gs, nus, bool(flagged))
