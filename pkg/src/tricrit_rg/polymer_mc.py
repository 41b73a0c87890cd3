"""Monte Carlo for the continuous-time weakly self-avoiding walk on a torus.

The walk X(t) jumps at rate 6 to a uniform nearest neighbour; L_{T,x} is the
time spent at x up to T.  The two-point function

    G_{0,x}(a, g, ν) = ∫_0^∞ E_0[ e^{-Σ_y (a L_{T,y}³ + g L_{T,y}²)} 1{X(T) = x} ] e^{-νT} dT

reduces to the torus resolvent (-Δ + ν)^{-1}_{0,x} when a = g = 0.

Two estimators:
  "exponential": draw T ~ Exp(ν) and score weight·1{X(T)=x}/ν (unbiased, ν > 0);
  "grid":        Gauss-Legendre in log T on [T_min, T_max], one path per sample
                 scored at every node; the tail beyond T_max is bounded with
                 e^{-aT³|Λ|^{-2} + |g|T² + |ν|T}.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from . import lattice

STEPS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


class PolymerError(RuntimeError):
    pass


@dataclass
class PolymerSample:
    side: int
    T: float
    jump_times: np.ndarray
    sites: np.ndarray          # visited sites in order, shape (K+1, 3)
    local_times: np.ndarray    # side³ array
    endpoint: np.ndarray

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)


@dataclass
class Estimate:
    mean: float
    stderr: float
    count: int
    seed: int
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), default=float)


def _site_index(p: np.ndarray, side: int) -> np.ndarray:
    p = np.mod(p, side)
    return (p[..., 0] * side + p[..., 1]) * side + p[..., 2]


def simulate(side: int, T: float, seed=None, rng=None) -> PolymerSample:
    """Exact path on [0, T]: rate-6 exponential clocks, uniform neighbour steps."""
    if side < 2 or not T > 0:
        raise ValueError("need side >= 2 and T > 0")
    rng = rng if rng is not None else np.random.default_rng(seed)
    times = []
    t = rng.exponential(1.0 / 6.0)
    while t < T:
        times.append(t)
        t += rng.exponential(1.0 / 6.0)
    times = np.array(times)
    steps = STEPS[rng.integers(0, 6, len(times))]
    sites = np.vstack([np.zeros((1, 3), int), np.cumsum(steps, axis=0)]) if len(times) else np.zeros((1, 3), int)
    hold = np.diff(np.concatenate([[0.0], times, [T]]))
    lt = np.zeros(side ** 3)
    np.add.at(lt, _site_index(sites, side), hold)
    return PolymerSample(side, T, times, np.mod(sites, side), lt.reshape((side,) * 3), np.mod(sites[-1], side))


def _weight(lt: np.ndarray, a: float, g: float) -> np.ndarray:
    return np.exp(-(a * (lt ** 3).sum(axis=-1) + g * (lt ** 2).sum(axis=-1)))


def envelope(T, a: float, g: float, nu: float, volume: int):
    """A-priori bound on weight·e^{-νT}: e^{-aT³|Λ|^{-2} + |g|T² + |ν|T}."""
    T = np.asarray(T, float)
    return np.exp(-a * T ** 3 / volume ** 2 + abs(g) * T ** 2 + abs(nu) * T)


def _batch_paths(side, T, rng):
    """Vectorised exact paths for an array of horizons T.

    Returns per-sample endpoint index, local times as a (len(T), side³) array,
    and the jump counts."""
    ns = len(T)
    V = side ** 3
    K = rng.poisson(6.0 * T)
    tot = int(K.sum())
    owner = np.repeat(np.arange(ns), K)
    u = rng.random(tot) * T[owner]
    u = u[np.lexsort((u, owner))]               # sorted within each sample
    start = np.concatenate([[0], np.cumsum(K)[:-1]]).astype(int)
    steps = STEPS[rng.integers(0, 6, tot)]
    csum = np.cumsum(steps, axis=0)
    base = np.zeros((ns, 3), int)
    has = K > 0
    base[has] = csum[start[has]] - steps[start[has]]
    pos = csum - base[owner]                    # position after each jump
    # segments: [0, u1) at 0, [u_k, u_{k+1}) at pos_k, [u_K, T) at pos_K
    s_time = np.insert(u, start, 0.0)
    e_time = np.insert(u, start + K, T)
    sites = _site_index(np.insert(pos, start, 0, axis=0), side)
    seg_owner = np.repeat(np.arange(ns), K + 1)
    lt = np.bincount(seg_owner * V + sites, weights=e_time - s_time, minlength=ns * V)
    end = sites[np.cumsum(K + 1) - 1]
    return end, lt.reshape(ns, V), K


def estimate_c(side: int, a: float, g: float, nu: float, x, samples: int = 100_000, seed: int = 0,
               method: str = "exponential", T_grid=None, tol: float = 1e-6, batch: int = 20_000,
               check_envelope: bool = True) -> Estimate:
    """MC estimate of G_{0,x}(a, g, ν) on the torus of the given side."""
    if a < 0 or (a == 0 and g < 0):
        raise ValueError("need a > 0, or a = 0 with g >= 0")
    rng = np.random.default_rng(seed)
    V = side ** 3
    target = int(_site_index(lattice.as_point(x), side))
    params = dict(side=side, a=a, g=g, nu=nu, x=list(map(int, lattice.as_point(x))), method=method)
    if method == "exponential":
        if not nu > 0:
            raise ValueError("the exponential-time estimator needs nu > 0")
        vals = []
        done = 0
        while done < samples:
            m = min(batch, samples - done)
            T = rng.exponential(1.0 / nu, m)
            end, lt, _ = _batch_paths(side, T, rng)
            w = _weight(lt, a, g)
            if check_envelope and np.any(w * np.exp(-nu * T) > envelope(T, a, g, nu, V) * (1 + 1e-12)):
                raise PolymerError("a-priori envelope violated")
            vals.append(w * (end == target) / nu)
            done += m
        v = np.concatenate(vals)
        return Estimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), len(v), seed, params)
    if method != "grid":
        raise ValueError(method)
    # log-T Gauss-Legendre grid and analytic tail
    Tmin, Tmax, order = (1e-4, None, 48) if T_grid is None else T_grid
    if Tmax is None:
        Tmax = required_T_max(a, g, nu, V, tol)
    tail = tail_bound(Tmax, a, g, nu, V)
    if tail > tol:
        raise PolymerError(f"truncation tail {tail:.3g} above tol; need T_max beyond {Tmax}")
    xg, wg = np.polynomial.legendre.leggauss(order)
    lT = 0.5 * (math.log(Tmax) - math.log(Tmin)) * xg + 0.5 * (math.log(Tmax) + math.log(Tmin))
    Tn = np.exp(lT)
    wq = 0.5 * (math.log(Tmax) - math.log(Tmin)) * wg * Tn * np.exp(-nu * Tn)
    vals = np.empty(samples)
    for s in range(samples):
        path = simulate(side, Tmax, rng=rng)
        tj = np.concatenate([[0.0], path.jump_times])
        k = np.searchsorted(tj, Tn, side="right") - 1       # index of the site occupied at each node
        sites = _site_index(path.sites, side)
        at = sites[k] == target
        score = 0.0
        for i in np.nonzero(at)[0]:
            lt = np.zeros(V)
            hold = np.diff(np.concatenate([tj[:k[i] + 1], [Tn[i]]]))
            np.add.at(lt, sites[:k[i] + 1], hold)
            w = float(_weight(lt, a, g))
            if check_envelope and w * math.exp(-nu * Tn[i]) > envelope(Tn[i], a, g, nu, V) * (1 + 1e-12):
                raise PolymerError("a-priori envelope violated")
            score += wq[i] * w
        # [0, T_min]: the walk stays at 0 with probability ≈ 1
        if target == 0:
            score += Tmin
        vals[s] = score
    return Estimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples)), samples, seed,
                    dict(params, T_max=Tmax, tail_bound=tail))


def tail_bound(Tmax: float, a: float, g: float, nu: float, volume: int) -> float:
    f = lambda T: math.exp(-a * T ** 3 / volume ** 2 + abs(g) * T ** 2 - nu * T) if nu > 0 else \
        float(envelope(T, a, g, nu, volume))
    val, _ = integrate.quad(f, Tmax, np.inf, limit=200)
    return float(val)


def required_T_max(a, g, nu, volume, tol, T0: float = 1.0, cap: float = 1e6) -> float:
    T = T0
    while T < cap:
        if tail_bound(T, a, g, nu, volume) < tol:
            return T
        T *= 1.5
    raise PolymerError(f"tail bound does not drop below {tol} before T = {cap}")


# ---------------------------------------------------------------------------

@dataclass
class ThetaReport:
    side: int
    a: float
    m2: float
    g: float
    nu: float
    z0: float
    rows: list           # (|x|, estimate, stderr, free prediction, ratio)
    inconclusive: bool


def theta_probe(side: int, a: float, star, samples: int = 20_000, seed: int = 0, m2: float | None = None,
                radii=(1, 2, 3, 4)) -> ThetaReport:
    """MC two-point function at predicted star couplings vs (1 + z0*)·torus resolvent.

    `star` is a tricrit.StarTuple at n = 0 (its m2 is the comparison mass).
    This is a consistency probe, never a pass/fail test."""
    m2 = star.m2 if m2 is None else m2
    if not m2 > 0:
        raise ValueError("the torus comparison needs m2 > 0")
    rows, bad = [], False
    for i, r in enumerate(radii):
        x = (r, 0, 0)
        est = estimate_c(side, a, star.g_star, star.nu_star, x, samples, seed + i)
        free = (1.0 + star.z0_star) * lattice.torus_resolvent(side, m2, x)
        if est.stderr >= abs(est.mean):
            bad = True
        rows.append((r, est.mean, est.stderr, free, est.mean / free))
    return ThetaReport(side, a, m2, star.g_star, star.nu_star, star.z0_star, rows, bad)
