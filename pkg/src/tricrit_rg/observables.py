"""Observable couplings λ (linear in the field at a, b) and q (constant), the
two-point amplitude and the susceptibility.

λ flows below the coalescence scale j_ab and freezes; q starts at j_ab and
accumulates λ_aλ_b C_{j+1;a,b}.  With R ≡ 0 the telescoped q is
λ_aλ_b w_{N;a,b}, and q_∞ = λ_aλ_b C_{a,b}(m²) because Σ_j C_j = C.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from . import lattice
from .covariance import BetaTable, Decomposition
from .flow import FlowTrajectory


# ---------------------------------------------------------------------------
# λ

def delta_nu_w1(traj: FlowTrajectory, table: BetaTable, variant: str = "plus") -> np.ndarray:
    """δ_j[ν w^{(1)}] = ν_j^+ w_{j+1}^{(1)} - ν_j w_j^{(1)} for j = 0..depth-1.

    variant="plus": ν_j^+ = ν_j + β1^2 L^{-j} g_j + β1^3 L^{-2j} a_j (first-order part);
    variant="next": the post-step ν_{j+1} instead (differs at second order)."""
    D = traj.depth
    L = table.L
    mu1, mu2, mu3 = traj.mu1, traj.mu2, traj.mu3
    w1r = table.w1r
    j = np.arange(D)
    if variant == "plus":
        nup = mu1[:D] + table["b1_2"][:D] * mu2[:D] + table["b1_3"][:D] * mu3[:D]   # L^{2j} ν_j^+
    elif variant == "next":
        nup = mu1[1:D + 1] / L ** 2                                                 # L^{2j} ν_{j+1}
    else:
        raise ValueError(variant)
    # L^{-2j} w_{j+1} = L² · (L^{-2(j+1)} w_{j+1})
    return nup * L ** 2 * w1r[j + 1] - mu1[:D] * w1r[j]


@dataclass
class LambdaFlow:
    lam: np.ndarray       # λ_j, j = 0..depth
    j_ab: float
    delta: np.ndarray

    @property
    def frozen(self) -> float:
        """λ at (and beyond) the coalescence scale."""
        j = int(min(self.j_ab, len(self.lam) - 1))
        return float(self.lam[j])


def lambda_flow(traj: FlowTrajectory, table: BetaTable, j_ab=math.inf, depth: int | None = None,
                variant: str = "plus", remainder=None) -> LambdaFlow:
    """λ_{j+1} = (1 - δ_j)λ_j + R_j for j+1 < j_ab, λ_{j+1} = λ_j afterwards; λ_0 = 1."""
    D = traj.depth if depth is None else int(depth)
    d = delta_nu_w1(traj, table, variant)[:D]
    lam = np.empty(D + 1)
    lam[0] = 1.0
    for j in range(D):
        if j + 1 < j_ab:
            r = remainder(j, lam[j]) if remainder else 0.0
            lam[j + 1] = (1.0 - d[j]) * lam[j] + r
        else:
            lam[j + 1] = lam[j]
    return LambdaFlow(lam, j_ab, d)


def lambda_star_infinity(traj: FlowTrajectory, table: BetaTable, variant: str = "plus") -> float:
    """λ*_∞: the λ flow with j_ab = ∞ run to the end of the trajectory."""
    return float(lambda_flow(traj, table, math.inf, variant=variant).lam[-1])


# ---------------------------------------------------------------------------
# C_{j;a,b}

class SliceValues:
    """C_{j;0,x} for any j >= 1: direct kernels to j_direct, scaling profile beyond.

    Beyond the deepest direct scale J, C_{j;0,x} = L^{-(j-J)} C_{J;0,L^{J-j}x}
    (the profile c₀ tabulated from C_J), read off by trilinear interpolation."""

    def __init__(self, dec: Decomposition):
        self.dec = dec
        self.J = dec.ctx.j_max
        self.L = dec.ctx.L
        self._last = dec.slices[-1].kernel

    def __call__(self, j: int, x) -> float:
        if j < 1:
            return 0.0
        if j <= self.J:
            return self.dec.slices[j - 1].value(x)
        p = np.abs(lattice.as_point(x)).astype(float) * float(self.L) ** (self.J - j)
        v = map_coordinates(self._last, p.reshape(3, 1), order=1, mode="constant", cval=0.0)[0]
        return float(v) * float(self.L) ** (self.J - j)

    def in_range(self, j: int, x) -> bool:
        """Finite range: C_{j;0,x} can be nonzero only for |x| < ½L^j."""
        d = lattice.as_point(x)
        return 4 * int(np.dot(d, d)) < self.L ** (2 * j)


@dataclass
class QFlow:
    q: np.ndarray         # q_j, j = 0..N
    q_inf: float          # λ_aλ_b C_{a,b}(m²)
    j_ab: int
    lam_ab: tuple


def q_flow(lam_a: float, lam_b: float, a, b, values: SliceValues, depth: int, m2: float = 0.0,
           green=None) -> QFlow:
    """q_{j+1} = q_j + λ_aλ_b C_{j+1;a,b} (zero up to j_ab), telescoped to depth."""
    d = lattice.as_point(a) - lattice.as_point(b)
    jab = lattice.coalescence_scale(a, b, values.L)
    ll = lam_a * lam_b
    q = np.zeros(depth + 1)
    for j in range(depth):
        c = values(j + 1, d) if j + 1 > jab else 0.0
        q[j + 1] = q[j] + ll * c
    G = lattice.green_function(m2, d) if green is None else green
    return QFlow(q, ll * G, jab, (lam_a, lam_b))


def w_ab(values: SliceValues, a, b, N: int) -> float:
    d = lattice.as_point(a) - lattice.as_point(b)
    tot = 0.0
    for j in range(N):
        tot += values(j + 1, d)
    return tot


# ---------------------------------------------------------------------------
# two-point function

@dataclass
class TwoPointReport:
    r: float
    j_ab: int
    q_inf_raw: float
    q_inf: float          # normalised by λ*_∞²
    amplitude: float      # r·G_{a,b}
    G: float
    lam_ab: float
    lam_inf: float
    z0: float
    reference: float = 1.0 / (4.0 * math.pi)
    extras: dict = field(default_factory=dict)


def two_point(traj: FlowTrajectory, table: BetaTable, a, b, z0_star: float | None = None,
              variant: str = "plus") -> TwoPointReport:
    """G_{a,b} ≈ (1 + z0*)·½(q_{a,∞} + q_{b,∞}) with λ normalised by λ*_∞."""
    d = lattice.as_point(a) - lattice.as_point(b)
    r = float(np.linalg.norm(d))
    jab = lattice.coalescence_scale(a, b, table.L)
    lf = lambda_flow(traj, table, jab, variant=variant)
    lam_inf = lambda_star_infinity(traj, table, variant)
    lam = lf.frozen
    Gab = lattice.green_function(table.m2, d)
    q_raw = lam * lam * Gab          # q_a = q_b by symmetry of the construction
    q = q_raw / lam_inf ** 2
    z0 = traj.z0 if z0_star is None else z0_star
    G = (1.0 + z0) * 0.5 * (q + q)
    return TwoPointReport(r, jab, q_raw, q, r * G, G, lam, lam_inf, z0)


def susceptibility(traj: FlowTrajectory, table: BetaTable, z0_star: float | None = None,
                   normalise: bool = True, variant: str = "plus") -> float:
    """χ = (1 + z0*) λ*_∞ / m² (λ*_∞ → 1 after normalisation)."""
    if table.m2 <= 0:
        return math.inf
    z0 = traj.z0 if z0_star is None else z0_star
    lam = 1.0 if normalise else lambda_star_infinity(traj, table, variant)
    return (1.0 + z0) * lam / table.m2


def write_two_point_csv(reports, path, C: float = 1.0) -> None:
    with open(path, "w") as fh:
        fh.write("r,q_inf,amplitude,predicted_band_low,predicted_band_high\n")
        for rep in reports:
            lo = rep.reference * (1.0 - C / math.log(rep.r))
            hi = rep.reference * (1.0 + C / math.log(rep.r))
            fh.write(f"{rep.r!r},{rep.q_inf!r},{rep.amplitude!r},{lo!r},{hi!r}\n")
