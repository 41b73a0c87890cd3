"""Batch front-end: ``tricrit-rg <subcommand> [flags]``.

Configuration comes from an INI file (section ``[run]``) overridden by flags.
Every report is a JSON document stamped with the config hash and package
version; tabular data goes to CSV next to it, and ``--figures`` renders PNGs
from the same tables when matplotlib is installed.

Exit codes: 0 success, 1 a check in the report failed, 2 configuration error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import acceptance, covariance as cv, flow, lattice, observables, polymer_mc, ptmap, tricrit

log = logging.getLogger("tricrit_rg")

TAIL_QUADRATURE_MAX_SCALE = 7
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
NUMERICAL_ERRORS = (flow.FlowError, cv.DecompositionError, tricrit.StarError, lattice.QuadratureError,
                    polymer_mc.PolymerError, FloatingPointError, np.linalg.LinAlgError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def parse_grid(text) -> list:
    """'0.01', '0,0.01,0.1' or 'geom:start:ratio:count'."""
    if isinstance(text, (int, float)):
        return [float(text)]
    text = str(text).strip()
    try:
        if text.startswith("geom:"):
            _, start, ratio, count = text.split(":")
            return [float(start) * float(ratio) ** k for k in range(int(count))]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from None


@dataclass
class RunConfig:
    L: int = 2
    n: int = 1
    m2: list = field(default_factory=lambda: [0.0])
    a0: list = field(default_factory=lambda: [0.02])
    j_direct: int = 9
    depth: int = 2000
    seed: int = 0
    splice_tol: float = 0.05
    cache: str = ""
    out: str = "tricrit_out"
    radii: list = field(default_factory=lambda: [8, 16, 32, 64])
    side: int = 4
    a: float = 0.0
    g: float = 0.0
    nu: float = 1.0
    x: list = field(default_factory=lambda: [1, 0, 0])
    samples: int = 100_000
    mc_method: str = "exponential"
    figures: bool = False

    def validate(self) -> "RunConfig":
        if self.L < 2:
            raise ConfigError("L must be >= 2")
        if self.n < 0:
            raise ConfigError("n must be >= 0")
        if any(m < 0 for m in self.m2):
            raise ConfigError("m2 must be >= 0")
        if any(not (0 < a < flow.DELTA_CONFIG) for a in self.a0):
            raise ConfigError(f"a0 must lie in (0, {flow.DELTA_CONFIG})")
        if self.j_direct < 3:
            raise ConfigError("jdirect must be >= 3 (the splice needs three direct steps)")
        if self.depth < self.j_direct:
            raise ConfigError("depth must be >= jdirect")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not (2 <= self.side <= 16):
            raise ConfigError("torus side must lie in [2, 16]")
        if self.a < 0 or (self.a == 0 and self.g < 0):
            raise ConfigError("polymer-mc needs a > 0, or a = 0 with g >= 0")
        if len(self.x) != 3:
            raise ConfigError("x needs three integer coordinates")
        if self.samples < 2:
            raise ConfigError("samples must be >= 2")
        return self

    def hash(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k not in ("cache", "out", "figures")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_CAST = {"L": int, "n": int, "j_direct": int, "depth": int, "seed": int, "side": int, "samples": int,
         "splice_tol": float, "a": float, "g": float, "nu": float, "m2": parse_grid, "a0": parse_grid,
         "radii": lambda s: [int(v) for v in parse_grid(s)], "x": lambda s: [int(v) for v in parse_grid(s)],
         "cache": str, "out": str, "mc_method": str, "figures": lambda s: str(s).lower() in ("1", "true", "yes")}
_ALIASES = {"jdirect": "j_direct"}


def load_config(path: str | None, overrides: dict) -> RunConfig:
    raw = {}
    if path:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigError(f"cannot read config {path}")
        if "run" not in cp:
            raise ConfigError("config file needs a [run] section")
        raw.update(cp["run"])
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig()
    for key, val in raw.items():
        key = _ALIASES.get(key, key)
        if key not in _CAST:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _CAST[key](val))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {val!r} ({exc})") from None
    if not cfg.cache:
        cfg.cache = cv.default_cache_dir()
    return cfg.validate()


# ---------------------------------------------------------------------------
# report plumbing

class Report:
    """JSON report; every record carries module, anchor, scale and the config hash."""

    def __init__(self, name: str, cfg: RunConfig):
        self.name, self.cfg = name, cfg
        self.records, self.checks, self.files = [], [], []
        os.makedirs(cfg.out, exist_ok=True)

    def path(self, fname: str) -> str:
        p = os.path.join(self.cfg.out, fname)
        self.files.append(p)
        return p

    def add(self, module: str, anchor: str, value, scale=None, **params):
        self.records.append(dict(module=module, anchor=anchor, scale=scale, value=value,
                                 params=params, config_hash=self.cfg.hash()))

    def check(self, anchor: str, measured, tolerance, passed: bool, target=None):
        self.checks.append(dict(anchor=anchor, target=target, measured=measured, tolerance=tolerance,
                                passed=bool(passed)))

    @property
    def ok(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def write(self) -> str:
        doc = dict(tool="tricrit-rg", version=__version__, subcommand=self.name, config_hash=self.cfg.hash(),
                   config=asdict(self.cfg), records=self.records, checks=self.checks, files=self.files)
        p = os.path.join(self.cfg.out, f"{self.name}.json")
        with open(p, "w") as fh:
            json.dump(doc, fh, indent=1, default=_jsonable)
        return p


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    return str(o)


def _pyplot(cfg: RunConfig):
    if not cfg.figures:
        return None
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping figures (pip install tricrit-rg[plot])")
        return None
    return plt


def _save(plt, fig, rep: Report, fname: str):
    fig.tight_layout()
    fig.savefig(rep.path(fname), dpi=120)
    plt.close(fig)


def _tables(cfg: RunConfig, n: int | None = None) -> dict:
    n = cfg.n if n is None else n
    return {m2: cv.beta_table(cfg.L, n, m2, cfg.depth, cfg.j_direct, cache_dir=cfg.cache,
                              tol=cfg.splice_tol, log=log.info) for m2 in cfg.m2}


# ---------------------------------------------------------------------------
# subcommands

def cmd_decompose(cfg: RunConfig, args) -> Report:
    rep = Report("decompose", cfg)
    plt = _pyplot(cfg)
    for m2 in cfg.m2:
        ctx = lattice.ScaleContext(L=cfg.L, n=cfg.n, m2=m2, j_max=cfg.j_direct)
        dec = cv.build(ctx, cache_dir=cfg.cache, log=log.info)
        mo = dec.moments
        tag = f"m2_{m2:g}"
        mo.to_csv(rep.path(f"moments_{tag}.csv"))
        # slices do not depend on j_max; the tail quadrature is affordable up to scale 7
        jc = min(cfg.j_direct, TAIL_QUADRATURE_MAX_SCALE)
        total = dec.partial_sum(j=jc) + dec.tail(jc)
        G = lattice.green_function(m2)
        rel = abs(total - G) / G
        rep.add("covariance", "decomposition:diagonal-sum", total, jc, m2=m2, green=G, rel_error=rel,
                cache_key=cv.params_hash(ctx))
        rep.add("covariance", "decomposition:geometric-tail", dec.partial_sum() + dec.geometric_tail(),
                cfg.j_direct, m2=m2)
        rep.check(f"decomposition:diagonal-sum[m2={m2:g}]", rel, 1e-6, rel <= 1e-6, G)
        if plt:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            js = np.arange(1, cfg.j_direct + 1)
            ax.semilogy(js, mo.c[1:], "o-", label="C_j;00")
            ax.semilogy(js, np.abs(mo.cdelta[1:]), "s--", label="|ΔC_j|00")
            ax.set_xlabel("j")
            ax.legend()
            ax.set_title(f"slices, m²={m2:g}")
            _save(plt, fig, rep, f"decompose_{tag}.png")
    return rep


def cmd_flow(cfg: RunConfig, args) -> Report:
    rep = Report("flow", cfg)
    plt = _pyplot(cfg)
    for m2, tab in _tables(cfg).items():
        tab.to_csv(rep.path(f"betas_n{cfg.n}_m2_{m2:g}.csv"))
        for a0 in cfg.a0:
            tr = flow.critical_trajectory(a0, tab, cfg.depth)
            tag = f"n{cfg.n}_m2_{m2:g}_a0_{a0:g}"
            tr.to_csv(rep.path(f"flow_{tag}.csv"))
            for anchor, v in (("flow:g0-critical", tr.g0), ("flow:nu0-critical", tr.nu0),
                              ("flow:z0-critical", tr.z0), ("flow:mu3-final", float(tr.mu3[-1]))):
                rep.add("flow", anchor, v, 0 if "final" not in anchor else cfg.depth, m2=m2, a0=a0, n=cfg.n)
            rep.add("flow", "flow:truncation-tails", tr.tails, cfg.depth, m2=m2, a0=a0)
            rep.add("covariance", "provider:splice-back-error", tab.splice.worst, tab.j_direct, m2=m2)
            if plt:
                fig, ax = plt.subplots(figsize=(5, 3.5))
                j = np.arange(tr.depth + 1)
                ax.loglog(j[1:], tr.mu3[1:], label="μ3")
                ax.loglog(j[1:], np.abs(tr.mu2[1:]), label="|μ2|")
                ax.loglog(j[1:], np.abs(tr.mu1[1:]), label="|μ1|")
                ax.set_xlabel("j")
                ax.legend()
                ax.set_title(tag)
                _save(plt, fig, rep, f"flow_{tag}.png")
    return rep


def cmd_tune(cfg: RunConfig, args) -> Report:
    rep = Report("tune", cfg)
    rows = flow.tuning_surface(_tables(cfg), cfg.a0, cfg.depth)
    flow.write_tuning_csv(rows, rep.path(f"tuning_n{cfg.n}.csv"))
    for m2, a0, g, nu, z in rows:
        rep.add("flow", "tuning:critical-initial-data", dict(g0=g, nu0=nu, z0=z), 0, m2=m2, a0=a0, n=cfg.n)
    plt = _pyplot(cfg)
    if plt and rows:
        fig, axs = plt.subplots(1, 2, figsize=(8, 3.5))
        for m2 in cfg.m2:
            r = np.array([row for row in rows if row[0] == m2])
            axs[0].plot(r[:, 1], r[:, 2] / r[:, 1], "o-", label=f"m²={m2:g}")
            axs[1].plot(r[:, 1], r[:, 3] / r[:, 1], "o-", label=f"m²={m2:g}")
        axs[0].set_ylabel("g0c / a0")
        axs[1].set_ylabel("ν0c / a0")
        for ax in axs:
            ax.set_xscale("log")
            ax.set_xlabel("a0")
            ax.legend()
        _save(plt, fig, rep, f"tuning_n{cfg.n}.png")
    return rep


def cmd_tricrit(cfg: RunConfig, args) -> Report:
    rep = Report("tricrit", cfg)
    tabs = _tables(cfg)
    with open(rep.path(f"star_n{cfg.n}.csv"), "w") as fh:
        fh.write("m2,a,a0_star,g0_star,nu0_star,z0_star,g_star,nu_star,residual\n")
        for m2, tab in tabs.items():
            for a in cfg.a0:
                if not a < tricrit.DELTA1_CONFIG:
                    log.warning("a = %g outside (0, %g); skipped", a, tricrit.DELTA1_CONFIG)
                    continue
                st = tricrit.solve_star(a, tab, cfg.depth)
                fh.write(",".join(repr(float(v)) for v in asdict(st).values()) + "\n")
                anchor = "tricrit-point:star-couplings" if m2 > 0 else "tricrit-point:critical-couplings"
                rep.add("tricrit", anchor, st.as_dict(), 0, m2=m2, a=a, n=cfg.n)
    if 0.0 in tabs and len(cfg.a0) >= 5:
        C00 = lattice.green_function(0.0)
        sr = tricrit.asymptotic_slopes(cfg.a0, tabs[0.0], C00, cfg.depth)
        rep.add("tricrit", "tricrit-point:g-slope", sr.g_slope, 0, n=cfg.n, target=sr.target_g,
                uncertainty=sr.g_uncertainty)
        rep.add("tricrit", "tricrit-point:nu-slope", sr.nu_slope, 0, n=cfg.n, target=sr.target_nu,
                uncertainty=sr.nu_uncertainty)
        rep.check("tricrit-point:g-slope", sr.g_rel_error, 0.05, sr.g_rel_error <= 0.05, sr.target_g)
        rep.check("tricrit-point:nu-slope", sr.nu_rel_error, 0.10, sr.nu_rel_error <= 0.10, sr.target_nu)
        if sr.flagged:
            log.warning("a-grid reaches the non-linear regime (correction exponent far from 1)")
        with open(rep.path(f"slopes_n{cfg.n}.csv"), "w") as fh:
            fh.write("a0,g_over_a,nu_over_a,g_target,nu_target\n")
            for a, g, nu in zip(sorted(cfg.a0), sr.raw_g, sr.raw_nu):
                fh.write(f"{a!r},{g!r},{nu!r},{sr.target_g!r},{sr.target_nu!r}\n")
        plt = _pyplot(cfg)
        if plt:
            fig, axs = plt.subplots(1, 2, figsize=(8, 3.5))
            a = np.sort(cfg.a0)
            axs[0].plot(a, sr.raw_g, "o-")
            axs[0].axhline(sr.target_g, color="k", lw=0.8)
            axs[0].set_ylabel("g / a")
            axs[1].plot(a, sr.raw_nu, "o-")
            axs[1].axhline(sr.target_nu, color="k", lw=0.8)
            axs[1].set_ylabel("ν / a")
            for ax in axs:
                ax.set_xscale("log")
                ax.set_xlabel("a")
            _save(plt, fig, rep, f"slopes_n{cfg.n}.png")
    elif 0.0 in tabs:
        log.info("slopes need a geometric a-grid with >= 5 points (e.g. --a0 geom:0.02:0.5:6)")
    return rep


def cmd_twopoint(cfg: RunConfig, args) -> Report:
    rep = Report("twopoint", cfg)
    plt = _pyplot(cfg)
    if plt:
        fig, ax = plt.subplots(figsize=(5, 3.5))
    for m2, tab in _tables(cfg).items():
        for a0 in cfg.a0:
            tr = flow.critical_trajectory(a0, tab, cfg.depth)
            reps = [observables.two_point(tr, tab, (0, 0, 0), (r, 0, 0), z0_star=0.0) for r in cfg.radii]
            tag = f"n{cfg.n}_m2_{m2:g}_a0_{a0:g}"
            observables.write_two_point_csv(reps, rep.path(f"twopoint_{tag}.csv"))
            devs = []
            for r, tp in zip(cfg.radii, reps):
                rep.add("observables", "two-point:amplitude", tp.amplitude, tp.j_ab, r=r, m2=m2, a0=a0,
                        reference=tp.reference, lambda_frozen=tp.lam_ab, lambda_inf=tp.lam_inf)
                devs.append(abs(4 * math.pi * r * tp.q_inf - 1.0))
            rep.add("observables", "two-point:reference-line", 1.0 / (4 * math.pi), None)
            if m2 == 0 and len(cfg.radii) > 1:
                Cfit = max(d * math.log(r) for d, r in zip(devs, cfg.radii))
                rep.check(f"two-point:log-band-constant[{tag}]", Cfit, 1.0, Cfit <= 1.0)
            if plt:
                ax.plot(cfg.radii, [4 * math.pi * tp.amplitude for tp in reps], "o-", label=tag)
    if plt:
        ax.axhline(1.0, color="k", lw=0.8, label="(4π)⁻¹ reference")
        ax.set_xscale("log")
        ax.set_xlabel("|a-b|")
        ax.set_ylabel("4π |a-b| G")
        ax.legend(fontsize=7)
        _save(plt, fig, rep, f"twopoint_n{cfg.n}.png")
    return rep


def cmd_triangularity(cfg: RunConfig, args) -> Report:
    rep = Report("triangularity", cfg)
    for m2 in cfg.m2:
        dec = cv.build(lattice.ScaleContext(L=cfg.L, n=cfg.n, m2=m2, j_max=cfg.j_direct), cache_dir=cfg.cache,
                       log=log.info)
        fs = cv.cached_functionals(dec, cfg.cache, log.info)
        for reading in ("honest", "total"):
            tr = ptmap.triangularity_report(ptmap.kappa_tables(dec, cfg.n, reading=reading, functionals=fs))
            p = rep.path(f"triangularity_n{cfg.n}_m2_{m2:g}_{reading}.json")
            with open(p, "w") as fh:
                fh.write(tr.to_json())
            rep.add("ptmap", "triangularity:zero-entries", max(tr.zero_max.values()), cfg.j_direct,
                    m2=m2, reading=reading, failures=[f"{k}:{''.join(e)}" for k, e, _ in tr.failures()])
            if reading == "honest":
                rep.check(f"triangularity[m2={m2:g}]", max(tr.zero_max.values()), tr.zero_tol, tr.passed)
    return rep


def cmd_polymer(cfg: RunConfig, args) -> Report:
    rep = Report("polymer-mc", cfg)
    a = cfg.a
    est = polymer_mc.estimate_c(cfg.side, a, cfg.g, cfg.nu, cfg.x, cfg.samples, cfg.seed, method=cfg.mc_method)
    rep.add("polymer_mc", "polymer:two-point-estimate", est.mean, None, stderr=est.stderr, samples=est.count,
            seed=est.seed, **est.params)
    if a == 0 and cfg.g == 0:
        exact = lattice.torus_resolvent(cfg.side, cfg.nu, cfg.x)
        z = abs(est.mean - exact) / est.stderr
        rep.add("lattice", "polymer:free-resolvent", exact, None, side=cfg.side, nu=cfg.nu)
        rep.check("polymer:free-agreement", z, 3.0, z <= 3.0, exact)
    with open(rep.path("polymer_estimate.json"), "w") as fh:
        fh.write(est.to_json())
    return rep


def cmd_verify(cfg: RunConfig, args) -> Report:
    rep = Report("verify", cfg)
    ids = [int(c) for c in args.criterion] if args.criterion else None
    if ids and any(i not in acceptance.CHECKS for i in ids):
        raise ConfigError(f"criterion ids are 1..{len(acceptance.CHECKS)}")
    opts = dict(L=cfg.L, seed=cfg.seed)
    if args.depth is not None:
        opts["depth"] = cfg.depth
    if args.jdirect is not None:
        opts["j_direct"] = cfg.j_direct
    if args.a0 is not None:
        opts["a0"] = cfg.a0[0]
    results = acceptance.run(ids, cache_dir=cfg.cache, log=log.info, **opts)
    for r in results:
        print(r.line())
        rep.check(f"acceptance:{r.id}", r.measured, r.tolerance, r.passed, r.target)
        rep.add("acceptance", f"acceptance:{r.id}", r.measured, None, details=r.details, seconds=r.seconds)
    with open(rep.path("acceptance_summary.json"), "w") as fh:
        fh.write(acceptance.summary_json(results))
    return rep


COMMANDS = {"decompose": cmd_decompose, "flow": cmd_flow, "tune": cmd_tune, "tricrit": cmd_tricrit,
            "twopoint": cmd_twopoint, "triangularity": cmd_triangularity, "polymer-mc": cmd_polymer,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tricrit-rg", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a [run] section")
    common.add_argument("--out", help="output directory")
    common.add_argument("--cache", help="cache directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--n", type=int, help="number of field components")
    common.add_argument("--L", type=int)
    common.add_argument("--m2", help="REAL, comma list or geom:start:ratio:count")
    common.add_argument("--a0", help="REAL, comma list or geom:start:ratio:count")
    common.add_argument("--depth", type=int)
    common.add_argument("--jdirect", type=int)
    common.add_argument("--criterion", action="append", help="verify: run only this criterion (repeatable)")
    common.add_argument("--radii", help="twopoint: comma list of |a-b|")
    common.add_argument("--side", type=int, help="polymer-mc: torus side")
    common.add_argument("--a", type=float, help="polymer-mc: three-body coupling")
    common.add_argument("--g", type=float, help="polymer-mc: two-body coupling")
    common.add_argument("--nu", type=float, help="polymer-mc: killing rate")
    common.add_argument("--x", help="polymer-mc: endpoint, e.g. 1,0,0")
    common.add_argument("--samples", type=int)
    common.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    over = dict(out=args.out, cache=args.cache, seed=args.seed, n=args.n, L=args.L, m2=args.m2, a0=args.a0,
                depth=args.depth, j_direct=args.jdirect, radii=args.radii, side=args.side, a=args.a, g=args.g, nu=args.nu,
                x=args.x, samples=args.samples, figures=True if args.figures else None)
    try:
        cfg = load_config(args.config, over)
        rep = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        mod = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"numerical failure [{mod}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    path = rep.write()
    print(json.dumps(dict(report=path, config_hash=cfg.hash(), checks_passed=rep.ok,
                          n_records=len(rep.records)), default=_jsonable))
    return EXIT_OK if rep.ok else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
