"""Modified approximate flow in reduced variables μ = (μ1, μ2, μ3, μΔ).

    μ3+ = μ3 - β3 μ3² + e3
    μΔ+ = μΔ - βΔ μ3² + eΔ
    μ2+ = L(μ2 (1 - p2 β3 μ3) + β2^3 μ3 - β2^33 μ3² + e2)
    μ1+ = L²(μ1 + β1^2 μ2 + β1^3 μ3 - β1^22 μ2² - β1^23 μ2μ3 - β1^33 μ3² + e1)

μ3 is run forward from a0; μ2, μ1, μΔ are fixed by vanishing final
conditions (the critical manifold), which turns each into a backward sum.
Coefficient tables come from covariance.coefficient_provider.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lattice
from .covariance import BetaTable
from .ptmap import p2 as p2_of_n

DELTA_CONFIG = 0.05  # perturbative domain (0, δ) for L = 2


class FlowError(RuntimeError):
    """Coupling left the perturbative domain, or a backward sum did not converge."""


# ---------------------------------------------------------------------------
# remainders

class StubRemainder:
    """Bounded noise e_k = c χ_j μ3³ U(-1,1) in every component (robustness runs)."""

    def __init__(self, c: float = 1.0, seed: int = 0):
        self.c = float(c)
        self.rng = np.random.default_rng(seed)
        self._cache = {}

    def __call__(self, j: int, mu3: float, chi: float) -> np.ndarray:
        if j not in self._cache:
            self._cache[j] = self.rng.uniform(-1.0, 1.0, 4)
        return self.c * chi * mu3 ** 3 * self._cache[j]


def _zero_remainder(j, mu3, chi):
    return np.zeros(4)


def _resolve(remainder):
    if remainder in (None, "zero"):
        return _zero_remainder, "zero"
    if remainder == "stub":
        return StubRemainder(), "stub"
    if callable(remainder):
        return remainder, "stub" if isinstance(remainder, StubRemainder) else "user"
    raise ValueError(f"unknown remainder policy {remainder!r}")


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class FlowTrajectory:
    L: int
    n: int
    m2: float
    a0: float
    mu3: np.ndarray          # j = 0..depth
    mu2: np.ndarray
    mu1: np.ndarray
    muD: np.ndarray
    chi: np.ndarray
    remainder: str = "zero"
    tails: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.mu3) - 1

    @property
    def g0(self) -> float:
        return float(self.mu2[0])

    @property
    def nu0(self) -> float:
        return float(self.mu1[0])

    @property
    def z0(self) -> float:
        return float(self.muD[0])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("j,mu3,mu2,mu1,muDelta,chi_j\n")
            for j in range(self.depth + 1):
                fh.write(f"{j},{self.mu3[j]!r},{self.mu2[j]!r},{self.mu1[j]!r},{self.muD[j]!r},{self.chi[j]!r}\n")


def a_flow(a0: float, table: BetaTable, depth: int | None = None, delta: float = DELTA_CONFIG,
           remainder=None) -> np.ndarray:
    """μ3,j for j = 0..depth from μ3,0 = a0."""
    if not (0.0 < a0 < delta):
        raise FlowError(f"a0 = {a0} outside the perturbative domain (0, {delta})")
    depth = table.depth if depth is None else int(depth)
    if depth > table.depth:
        raise ValueError(f"table only reaches depth {table.depth}")
    rem, _ = _resolve(remainder)
    b = table["b3_33"]
    mu = np.empty(depth + 1)
    mu[0] = a0
    for j in range(depth):
        e3 = rem(j, mu[j], table.chi[j])[0]
        mu[j + 1] = mu[j] - b[j] * mu[j] ** 2 + e3
        if not (0.0 < mu[j + 1] < delta):
            raise FlowError(f"μ3 left (0, {delta}) at j={j + 1}: {mu[j + 1]}")
    return mu


def pi_log(mu3: np.ndarray, table: BetaTable, p2_value: float | None = None) -> np.ndarray:
    """P[k] = Σ_{l<k} log(1 - p2 β3_l μ3_l), so π_{i,j} = exp(P[j+1] - P[i])."""
    p = p2_of_n(table.n) if p2_value is None else p2_value
    D = len(mu3) - 1
    f = 1.0 - p * table["b3_33"][:D] * mu3[:D]
    if np.any(f <= 0):
        raise FlowError("π factor nonpositive: coupling outside the perturbative domain")
    return np.concatenate([[0.0], np.cumsum(np.log(f))])


def pi_product(mu3, table: BetaTable, i: int, j: int, p2_value: float | None = None) -> float:
    """π_{i,j} = Π_{k=i}^{j} (1 - p2 β3_k μ3_k)."""
    P = pi_log(np.asarray(mu3), table, p2_value)
    return float(math.exp(P[j + 1] - P[i]))


def backward_mu2(mu3: np.ndarray, table: BetaTable, remainder=None, p2_value: float | None = None):
    """μ2,j = Σ_{l>=j} L^{-(l-j)} π_{j,l}^{-1} (-β2^3 μ3,l + β2^33 μ3,l² - e2,l), μ2,D = 0.

    Returns (μ2, tail) with tail a bound on the truncation error at each j."""
    rem, _ = _resolve(remainder)
    L = table.L
    D = len(mu3) - 1
    p = p2_of_n(table.n) if p2_value is None else p2_value
    f = 1.0 - p * table["b3_33"][:D] * mu3[:D]
    s = np.array([-table["b2_3"][l] * mu3[l] + table["b2_33"][l] * mu3[l] ** 2
                  - rem(l, mu3[l], table.chi[l])[1] for l in range(D)])
    mu2 = np.zeros(D + 1)
    for j in range(D - 1, -1, -1):
        mu2[j] = (mu2[j + 1] / L + s[j]) / f[j]
    # the dropped part is L^{-(D-j)}π^{-1}μ2,D(true); |μ2,D| ≲ |s|/(1-1/L) at the end
    tail_end = abs(s[-1]) / (1.0 - 1.0 / L) / f[-1]
    P = pi_log(mu3, table, p)
    tail = tail_end * float(L) ** (-(D - np.arange(D + 1))) * np.exp(-(P[D] - P[:D + 1]))
    return mu2, tail


def backward_mu1(mu2: np.ndarray, mu3: np.ndarray, table: BetaTable, remainder=None):
    """μ1,j = -Σ_{l>=j} L^{-2(l-j)} ρ1,l with
    ρ1 = β1^2 μ2 + β1^3 μ3 - β1^22 μ2² - β1^23 μ2 μ3 - β1^33 μ3² + e1,  μ1,D = 0."""
    rem, _ = _resolve(remainder)
    L = table.L
    D = len(mu3) - 1
    rho = np.array([table["b1_2"][l] * mu2[l] + table["b1_3"][l] * mu3[l] - table["b1_22"][l] * mu2[l] ** 2
                    - table["b1_23"][l] * mu2[l] * mu3[l] - table["b1_33"][l] * mu3[l] ** 2
                    + rem(l, mu3[l], table.chi[l])[2] for l in range(D)])
    mu1 = np.zeros(D + 1)
    for j in range(D - 1, -1, -1):
        mu1[j] = mu1[j + 1] / L ** 2 - rho[j]
    tail_end = abs(rho[-1]) / (1.0 - 1.0 / L ** 2)
    tail = tail_end * float(L) ** (-2.0 * (D - np.arange(D + 1)))
    return mu1, tail


def backward_mu_delta(mu3: np.ndarray, table: BetaTable, remainder=None, close_tail: bool = True):
    """μΔ,j = Σ_{l>=j} (βΔ_l μ3,l² - eΔ,l), vanishing at infinity.

    At m2 = 0 the terms decay only like l^{-2}; the part beyond the last scale is
    closed with the asymptotic μ3,l ≈ μ3,D/(1 + β3 μ3,D (l-D)) and returned as
    the tail estimate."""
    rem, _ = _resolve(remainder)
    D = len(mu3) - 1
    terms = np.array([table["bD_33"][l] * mu3[l] ** 2 - rem(l, mu3[l], table.chi[l])[3] for l in range(D)])
    muD = np.zeros(D + 1)
    b3 = table["b3_33"][D - 1]
    if close_tail:
        m = mu3[D]
        if table.m2 == 0 or D - 1 < table.j_m:
            # Σ_{l>=D} m²/(1 + b m (l-D))² ≈ m/b + m²/2
            tail = table["bD_33"][D - 1] * (m / b3 + 0.5 * m * m)
        else:
            # μ3 frozen, coefficients halving: Σ_k 2^{-(k+1)} = 1
            tail = table["bD_33"][D - 1] * m * m
    else:
        tail = 0.0
    muD[D] = tail
    for j in range(D - 1, -1, -1):
        muD[j] = muD[j + 1] + terms[j]
    return muD, abs(tail)


def forward_flow(mu0, table: BetaTable, depth: int, remainder=None, p2_value: float | None = None) -> np.ndarray:
    """Iterate the full system from μ(0) = (μ1, μ2, μ3, μΔ); rows j = 0..depth."""
    rem, _ = _resolve(remainder)
    L = table.L
    p = p2_of_n(table.n) if p2_value is None else p2_value
    out = np.zeros((depth + 1, 4))
    out[0] = mu0
    for j in range(depth):
        m1, m2, m3, mD = out[j]
        e = rem(j, m3, table.chi[j])
        b3 = table["b3_33"][j]
        out[j + 1, 2] = m3 - b3 * m3 ** 2 + e[0]
        out[j + 1, 3] = mD - table["bD_33"][j] * m3 ** 2 + e[3]
        out[j + 1, 1] = L * (m2 * (1 - p * b3 * m3) + table["b2_3"][j] * m3 - table["b2_33"][j] * m3 ** 2 + e[1])
        out[j + 1, 0] = L ** 2 * (m1 + table["b1_2"][j] * m2 + table["b1_3"][j] * m3 - table["b1_22"][j] * m2 ** 2
                                  - table["b1_23"][j] * m2 * m3 - table["b1_33"][j] * m3 ** 2 + e[2])
    return out


def critical_trajectory(a0: float, table: BetaTable, depth: int | None = None, remainder=None,
                        delta: float = DELTA_CONFIG) -> FlowTrajectory:
    """μ3 forward, then μ2, μ1, μΔ backward with zero final conditions."""
    rem, policy = _resolve(remainder)
    depth = table.depth if depth is None else int(depth)
    mu3 = a_flow(a0, table, depth, delta, rem)
    mu2, t2 = backward_mu2(mu3, table, rem)
    mu1, t1 = backward_mu1(mu2, mu3, table, rem)
    muD, tD = backward_mu_delta(mu3, table, rem)
    chi = np.array([lattice.chi(j, table.j_m) for j in range(depth + 1)])
    tails = {"mu2": float(t2[0]), "mu1": float(t1[0]), "muDelta": float(tD)}
    return FlowTrajectory(table.L, table.n, table.m2, a0, mu3, mu2, mu1, muD, chi, policy, tails)


def tune(a0: float, table: BetaTable, depth: int | None = None, remainder=None) -> tuple:
    """Critical initial data (g0c, ν0c, z0c) at scale 0 (dimensionful = reduced there)."""
    tr = critical_trajectory(a0, table, depth, remainder)
    return tr.g0, tr.nu0, tr.z0


def tuning_surface(tables: dict, a0_grid, depth: int | None = None) -> list:
    """Rows (m2, a0, g0c, nu0c, z0c) over {m2: table} × a0_grid."""
    rows = []
    for m2, tab in sorted(tables.items()):
        for a0 in a0_grid:
            g, nu, z = tune(float(a0), tab, depth)
            rows.append((m2, float(a0), g, nu, z))
    return rows


def write_tuning_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("m2,a0,g0c,nu0c,z0c\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")
