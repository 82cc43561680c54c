"""Command-line runner: ``twophoton <subcommand> --config run.ini --out dir``.

The configuration is INI text.  Phantom sections (``[sigma_a]``,
``[sigma_b]``, ``[kappa]``) hold one primitive per key::

    [sigma_a]
    gaussian = center=0.1,-0.2 amplitude=0.4 width=0.3
    gaussian.2 = center=-0.3,0.3 amplitude=0.1 width=0.2
    constant = 0.05

Every run writes ``report.json`` (deterministic: same config and seed give
identical bytes) and ``timing.json`` (wall-clock times) next to its CSVs.
"""

from __future__ import annotations

import argparse
import configparser
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as tio
from .coefficients import (BoundarySource, BumpProfile, CollimatedSource, MollifiedBeam, Phantom, PhaseFunction,
                           ScalarField, SmoothSource, ValidationError)
from .geometry import AngularGrid, Domain, DomainError, Grid, boundary_sets, make_domain
from .metrics import MetricsReport, rel_l2, rel_linf
from .reconstruction import (AlbedoOracle, GeometricSequence, LimitSchedule, effective_attenuation_field,
                             recover_k_point, recover_sigma_a_scatterfree, recover_sigma_b_scatterfree,
                             recover_sigma_b_scattering, scattering_sinogram)
from .transforms import LineSet, invert_ls, xray
from .transport import (AdmissibilityError, ConvergenceError, SolverSettings, TransportProblem, expansion_remainder,
                        expansion_terms, joint_solution, solve_nonlinear, solve_riccati_ray, trace_on)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INADMISSIBLE = 3
EXIT_NOT_CONVERGED = 4

SUBCOMMANDS = ("forward", "riccati", "admissibility", "recon-sa", "recon-sb", "recon-sa-scatter",
               "recon-sb-scatter", "recon-k", "expansion-check")


class ConfigError(ValueError):
    """Invalid configuration, with the offending section/key in the message."""


# ---------------------------------------------------------------------------
# typed parsing


def _floats(text: str, where: str, n: int | None = None) -> tuple:
    try:
        vals = tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{where}: expected numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{where}: expected {n} numbers, got {len(vals)}")
    if not all(math.isfinite(v) for v in vals):
        raise ConfigError(f"{where}: values must be finite")
    return vals


def _float(sec, key, default=None, positive=False, nonneg=False):
    where = f"[{sec.name}] {key}"
    if key not in sec:
        if default is None:
            raise ConfigError(f"{where}: required")
        return float(default)
    try:
        v = float(sec[key])
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {sec[key]!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{where}: must be finite")
    if positive and not v > 0:
        raise ConfigError(f"{where}: must be positive")
    if nonneg and v < 0:
        raise ConfigError(f"{where}: must be nonnegative")
    return v


def _int(sec, key, default=None, minimum=None):
    where = f"[{sec.name}] {key}"
    if key not in sec:
        if default is None:
            raise ConfigError(f"{where}: required")
        return int(default)
    try:
        v = int(sec[key])
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {sec[key]!r}") from None
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}")
    return v


def _bool(sec, key, default=False):
    if key not in sec:
        return default
    try:
        return sec.getboolean(key)
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key}: expected true/false") from None


def _primitive(kind: str, text: str, where: str, dim: int) -> dict:
    if kind == "constant":
        return {"type": "constant", "amplitude": _floats(text, where, 1)[0]}
    out = {"type": kind}
    for tok in text.split():
        if "=" not in tok:
            raise ConfigError(f"{where}: expected name=value, got {tok!r}")
        name, val = tok.split("=", 1)
        if name == "center":
            out["center"] = _floats(val, f"{where} center", dim)
        elif name in ("amplitude", "width", "radius"):
            out[name] = _floats(val, f"{where} {name}", 1)[0]
        else:
            raise ConfigError(f"{where}: unknown field {name!r}")
    need = {"gaussian": ("center", "amplitude", "width"), "disc": ("center", "amplitude", "radius")}[kind]
    missing = [n for n in need if n not in out]
    if missing:
        raise ConfigError(f"{where}: missing {', '.join(missing)}")
    return out


def _phantom(cp, name: str, dim: int) -> Phantom:
    if not cp.has_section(name):
        return Phantom(())
    prims = []
    for key, text in cp[name].items():
        kind = key.split(".")[0]
        if kind not in ("gaussian", "disc", "constant"):
            raise ConfigError(f"[{name}] {key}: unknown primitive (gaussian, disc, constant)")
        prims.append(_primitive(kind, text, f"[{name}] {key}", dim))
    try:
        return Phantom(tuple(prims))
    except ValidationError as e:
        raise ConfigError(f"[{name}]: {e}") from None


def _sequence(sec, name: str, head_default=None):
    if name not in sec and head_default is None:
        return None
    head = _float(sec, name, head_default, positive=True)
    try:
        return GeometricSequence(head, _float(sec, f"{name}.ratio", 0.5), _int(sec, f"{name}.levels", 3, 1),
                                 None if f"{name}.order" not in sec else _int(sec, f"{name}.order"),
                                 _float(sec, f"{name}.rate", 1.0, positive=True))
    except ValidationError as e:
        raise ConfigError(f"[{sec.name}] {name}: {e}") from None


@dataclass
class RunConfig:
    """Validated run configuration (see module docstring for the format)."""

    domain: Domain
    grid_n: int
    angles: AngularGrid
    step: float | None
    sigma_a: Phantom
    sigma_b: Phantom
    kappa: Phantom
    phase: str
    g: float
    source: dict
    settings: SolverSettings
    lines: dict
    schedule: dict
    riccati: dict
    scatterfree: dict
    kpoints: list
    expansion: dict
    seed: int = 0
    noise: float = 0.0
    out: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def grid(self) -> Grid:
        return Grid.over(self.domain, self.grid_n)

    def fields(self, grid: Grid | None = None):
        grid = grid or self.grid()
        sa = self.sigma_a.sample(grid)
        sb = self.sigma_b.sample(grid)
        kap = self.kappa.sample(grid)
        if self.phase == "isotropic":
            k = PhaseFunction.isotropic(kap)
        else:
            k = PhaseFunction.henyey_greenstein(kap, self.g, self.dim)
        return sa, sb, k

    def make_source(self) -> BoundarySource:
        s = self.source
        kind = s["kind"]
        if kind == "constant":
            return SmoothSource.constant(s["c0"])
        if kind == "collimated":
            return CollimatedSource(s["v"], s["theta"])
        return MollifiedBeam(s["c0"], s["delta"], s["eps"], s["theta"], s.get("eps_x"), s.get("x_center"),
                             BumpProfile(s["profile"]))

    def to_dict(self) -> dict:
        return self.raw


def load_config(path) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(cp)


def parse_config(cp: configparser.ConfigParser) -> RunConfig:
    known = {"run", "domain", "discretization", "sigma_a", "sigma_b", "kappa", "kernel", "source", "solver",
             "lines", "schedule", "riccati", "scatterfree", "kpoints", "expansion"}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")

    def sec(name):
        return cp[name] if cp.has_section(name) else _Empty(name)

    d = sec("domain")
    kind = d.get("kind", "disk2")
    spec = {"kind": kind}
    dim = 3 if kind == "ball3" else 2
    if kind in ("disk2", "ball3"):
        if "center" in d:
            spec["center"] = _floats(d["center"], "[domain] center", dim)
        spec["radius"] = _float(d, "radius", 1.0, positive=True)
    elif kind == "rect2":
        spec["lo"] = _floats(d.get("lo", "0 0"), "[domain] lo", 2)
        spec["hi"] = _floats(d.get("hi", "1 1"), "[domain] hi", 2)
    else:
        raise ConfigError(f"[domain] kind: unknown {kind!r} (disk2, ball3, rect2)")
    try:
        domain = make_domain(spec)
    except (ValueError, DomainError) as e:
        raise ConfigError(f"[domain]: {e}") from None

    disc = sec("discretization")
    grid_n = _int(disc, "grid", 48 if dim == 2 else 24, 4)
    if dim == 2:
        angles = AngularGrid.circle(_int(disc, "angles", 32, 4))
        ang_raw = {"angles": angles.directions.shape[0]}
    else:
        npol = _int(disc, "polar", 10, 2)
        naz = _int(disc, "azimuth", 20, 4)
        angles = AngularGrid.sphere(npol, naz)
        ang_raw = {"polar": npol, "azimuth": naz}
    step = _float(disc, "step", positive=True) if "step" in disc else None

    kern = sec("kernel")
    phase = kern.get("phase", "isotropic")
    if phase not in ("isotropic", "hg"):
        raise ConfigError("[kernel] phase: isotropic or hg")
    g = _float(kern, "g", 0.0)
    if not -1 < g < 1:
        raise ConfigError("[kernel] g: must lie in (-1, 1)")

    src = sec("source")
    skind = src.get("kind", "constant")
    source = {"kind": skind}
    if skind == "constant":
        source["c0"] = _float(src, "c0", 1.0, nonneg=True)
    elif skind == "collimated":
        source["v"] = _float(src, "v", 1.0, positive=True)
        source["theta"] = _floats(src.get("theta", "1 0" if dim == 2 else "1 0 0"), "[source] theta", dim)
    elif skind == "beam":
        source["c0"] = _float(src, "c0", 0.0, nonneg=True)
        source["delta"] = _float(src, "delta", 1e-2, positive=True)
        source["eps"] = _float(src, "eps", 0.1, positive=True)
        source["theta"] = _floats(src.get("theta", "1 0" if dim == 2 else "1 0 0"), "[source] theta", dim)
        source["profile"] = src.get("profile", "plateau")
        if source["profile"] not in ("plateau", "exp"):
            raise ConfigError("[source] profile: plateau or exp")
        if "eps_x" in src or "x_center" in src:
            source["eps_x"] = _float(src, "eps_x", positive=True)
            source["x_center"] = _floats(src.get("x_center", ""), "[source] x_center", dim)
    else:
        raise ConfigError(f"[source] kind: unknown {skind!r} (constant, collimated, beam)")
    if "theta" in source and np.linalg.norm(source["theta"]) == 0:
        raise ConfigError("[source] theta: zero direction")

    sol = sec("solver")
    try:
        settings = SolverSettings(_float(sol, "tol", 1e-10, positive=True),
                                  _float(sol, "inner_tol", 1e-12, positive=True),
                                  _int(sol, "max_outer", 200, 1))
    except ValidationError as e:
        raise ConfigError(f"[solver]: {e}") from None

    ln = sec("lines")
    lines = {"angles": _int(ln, "angles", 120, 1), "offsets": _int(ln, "offsets", 120, 1),
             "full_circle": _bool(ln, "full_circle", False), "lambda": _float(ln, "lambda", 1e-3, nonneg=True),
             "max_iters": _int(ln, "max_iters", 200, 1), "cgls_tol": _float(ln, "cgls_tol", 1e-6, positive=True),
             "recon_grid": _int(ln, "recon_grid", grid_n, 4),
             "mask_fraction": _float(ln, "mask_fraction", 0.9, positive=True)}
    if lines["mask_fraction"] > 1:
        raise ConfigError("[lines] mask_fraction: must be <= 1")

    sch = sec("schedule")
    schedule = {name: _sequence(sch, name, default) for name, default in
                (("eps", 0.1), ("delta", 1e-2), ("gamma", 0.1), ("eps_x", None), ("gamma1", None), ("gamma2", None))}
    schedule["c0"] = _float(sch, "c0", 1.0, positive=True)
    schedule["aperture_resolution"] = _int(sch, "aperture_resolution", 16, 2)

    ric = sec("riccati")
    riccati = {"x0": _floats(ric["x0"], "[riccati] x0", dim) if "x0" in ric else None,
               "theta0": _floats(ric.get("theta0", "1 0" if dim == 2 else "1 0 0"), "[riccati] theta0", dim),
               "v0": _float(ric, "v0", 1.0, nonneg=True),
               "step": _float(ric, "step", 1e-3, positive=True)}

    sf = sec("scatterfree")
    levels = _floats(sf.get("levels", "1.0 0.5"), "[scatterfree] levels", 2)
    if not levels[0] > levels[1] > 0:
        raise ConfigError("[scatterfree] levels: need v1 > v2 > 0")
    scatterfree = {"levels": levels, "v_in": _float(sf, "v_in", 1.0, positive=True)}

    kp = sec("kpoints")
    kpoints = []
    for key, text in kp.items():
        if not key.startswith("triple"):
            continue
        parts = [p.strip() for p in text.split("|")]
        if len(parts) != 3:
            raise ConfigError(f"[kpoints] {key}: expected 'x | theta_p | theta'")
        kpoints.append(tuple(_floats(p, f"[kpoints] {key}", dim) for p in parts))
    kp_opts = {"n_a": _int(kp, "n_a", 24, 2), "b_resolution": _float(kp, "b_resolution", 6.0, positive=True)}

    ex = sec("expansion")
    expansion = {"deltas": _floats(ex.get("deltas", "1e-2 5e-3 2.5e-3"), "[expansion] deltas"),
                 "c0": _float(ex, "c0", 1.0, nonneg=True), "eps": _float(ex, "eps", 0.3, positive=True),
                 "theta": _floats(ex.get("theta", "1 0" if dim == 2 else "1 0 0"), "[expansion] theta", dim)}

    run = sec("run")
    seed = _int(run, "seed", 0, 0)
    noise = _float(run, "noise", 0.0, nonneg=True)
    out = run.get("out")

    phantoms = {n: _phantom(cp, n, dim) for n in ("sigma_a", "sigma_b", "kappa")}
    raw = {"domain": domain.to_dict(), "discretization": {"grid": grid_n, **ang_raw, "step": step},
           "sigma_a": phantoms["sigma_a"].to_list(), "sigma_b": phantoms["sigma_b"].to_list(),
           "kappa": phantoms["kappa"].to_list(), "kernel": {"phase": phase, "g": g}, "source": source,
           "solver": {"tol": settings.tol, "inner_tol": settings.inner_tol, "max_outer": settings.max_outer},
           "lines": lines, "schedule": {k: (v.to_dict() if isinstance(v, GeometricSequence) else v)
                                        for k, v in schedule.items()},
           "riccati": riccati, "scatterfree": scatterfree, "kpoints": {"triples": kpoints, **kp_opts},
           "expansion": expansion, "run": {"seed": seed, "noise": noise}}
    return RunConfig(domain, grid_n, angles, step, phantoms["sigma_a"], phantoms["sigma_b"], phantoms["kappa"],
                     phase, g, source, settings, lines, schedule, riccati, scatterfree,
                     [(t, kp_opts) for t in kpoints], expansion, seed, noise, out, raw)


class _Empty(dict):
    # stand-in for a missing section
    def __init__(self, name):
        super().__init__()
        self.name = name


# ---------------------------------------------------------------------------
# runners


@dataclass
class RunContext:
    cfg: RunConfig
    out: Path
    rng: np.random.Generator
    quiet: bool
    timing: dict = field(default_factory=dict)

    def log(self, msg: str):
        if not self.quiet:
            print(msg, file=sys.stderr)


def _schedule(cfg: RunConfig) -> LimitSchedule:
    s = cfg.schedule
    return LimitSchedule(s["eps"], s["delta"], s["gamma"], s["eps_x"], s["gamma1"], s["gamma2"])


def _oracle(cfg: RunConfig) -> AlbedoOracle:
    sa, sb, k = cfg.fields()
    return AlbedoOracle(cfg.domain, sa, sb, k, angles=cfg.angles, step=cfg.step, settings=cfg.settings)


def _metrics(est: ScalarField, truth: ScalarField, cfg: RunConfig, **extra) -> dict:
    r = rel_l2(est, truth, cfg.domain, cfg.lines["mask_fraction"])
    rep = MetricsReport(r.value, rel_linf(est, truth, cfg.domain, cfg.lines["mask_fraction"]),
                        cfg.lines["mask_fraction"], r.absolute, **extra)
    d = rep.to_dict()
    d.pop("runtimes_s")
    return d


def run_forward(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    sa, sb, k = cfg.fields()
    prob = TransportProblem(cfg.domain, sa, sb, k, angles=cfg.angles, step=cfg.step)
    f = cfg.make_source()
    u = solve_nonlinear(prob, f, cfg.settings.tol, cfg.settings.inner_tol, cfg.settings.max_outer)
    tr = trace_on(u, boundary_sets(cfg.domain, cfg.angles, 64))
    cols, rows = tr.export_rows()
    tio.write_csv(ctx.out / "trace.csv", cols, rows)
    tio.write_field(ctx.out / "mean.csv", ScalarField(prob.grid, np.abs(u.mean_field())))
    tio.write_csv(ctx.out / "radiance.csv", *u.export_rows())
    diag = dict(u.diagnostics)
    ctx.timing["solve_s"] = diag.pop("runtime_s", None)
    metrics = MetricsReport(iterations={"outer": diag["outer_iterations"], "inner": diag["inner_iterations"]},
                            contraction_ratios=diag["contraction_ratios"]).to_dict()
    metrics.pop("runtimes_s")
    return {"solver": diag, "metrics": metrics}


def run_riccati(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    r = cfg.riccati
    th = np.asarray(r["theta0"], dtype=float)
    th = th / np.linalg.norm(th)
    if r["x0"] is None:
        # inflow point of the diameter along theta0
        lo, hi = cfg.domain.bbox
        c = 0.5 * (lo + hi)
        t0, _ = cfg.domain.clip_line(c[None, :], th[None, :])
        x0 = c + t0[0] * th
    else:
        x0 = np.asarray(r["x0"], dtype=float)
    prof = solve_riccati_ray(cfg.sigma_a, cfg.sigma_b, r["v0"], x0, th, r["step"], cfg.domain)
    x = prof.x0[None, :] + prof.s[:, None] * prof.theta0[None, :]
    cols = ["s"] + ["x", "y", "z"][:cfg.dim] + ["v", "mu", "B"]
    tio.write_csv(ctx.out / "profile.csv", cols, np.column_stack([prof.s, x, prof.v, prof.mu, prof.B]))
    return {"x0": x0.tolist(), "theta0": th.tolist(), "v0": r["v0"], "length": prof.length,
            "exit_value": prof.exit_value}


def run_admissibility(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    sa, sb, k = cfg.fields()
    prob = TransportProblem(cfg.domain, sa, sb, k, angles=cfg.angles, step=cfg.step)
    rep = prob.admissibility(cfg.make_source())
    out = rep.to_dict()
    out["passed"] = rep.passed
    if not rep.passed:
        raise AdmissibilityError(f"inadmissible: {', '.join(rep.failures())}", rep)
    return out


def _lineset(cfg: RunConfig) -> LineSet:
    if cfg.dim != 2:
        raise ConfigError("line-based reconstructions need a 2-D domain")
    L = cfg.lines
    return LineSet.parallel_beam(cfg.domain, L["angles"], L["offsets"], L["full_circle"])


def _recon_grid(cfg: RunConfig) -> Grid:
    return Grid.over(cfg.domain, cfg.lines["recon_grid"])


def _finish_recon(ctx, res, truth_phantom, prefix):
    cfg = ctx.cfg
    paths = res.write(ctx.out, prefix)
    rep = dict(res.report)
    ctx.timing[prefix] = rep.pop("runtime_s", None)
    truth = truth_phantom.sample(res.field.grid)
    tio.write_field(ctx.out / f"{prefix}_truth.csv", truth)
    rep["metrics"] = _metrics(res.field, truth, cfg, iterations={"cgls": rep.get("cgls", {}).get("iterations")})
    rep["files"] = paths
    return rep


def run_recon_sa(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    orc = _oracle(cfg)
    res = recover_sigma_a_scatterfree(orc, _lineset(cfg), cfg.scatterfree["levels"], _recon_grid(cfg),
                                      cfg.lines["lambda"], cfg.lines["max_iters"], cfg.lines["cgls_tol"],
                                      cfg.step, cfg.noise, ctx.rng)
    return _finish_recon(ctx, res, cfg.sigma_a, "sigma_a")


def run_recon_sb(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    orc = _oracle(cfg)
    res = recover_sigma_b_scatterfree(orc, orc.sigma_a, _lineset(cfg), cfg.scatterfree["v_in"], _recon_grid(cfg),
                                      cfg.lines["lambda"], cfg.lines["max_iters"], cfg.lines["cgls_tol"],
                                      cfg.step, cfg.noise, ctx.rng)
    return _finish_recon(ctx, res, cfg.sigma_b, "sigma_b")


def _strip_runtime(rep: dict, ctx: RunContext, key: str) -> dict:
    rep = dict(rep)
    ctx.timing[key] = rep.pop("runtime_s", None)
    return rep


def run_recon_sa_scatter(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    orc = _oracle(cfg)
    lines = _lineset(cfg)
    t0 = time.perf_counter()
    sino, rep = scattering_sinogram(orc, lines, _schedule(cfg), None, cfg.schedule["aperture_resolution"],
                                    progress=lambda i, n: ctx.log(f"direction {i}/{n}"))
    rep = _strip_runtime(rep, ctx, "line_data_s")
    ref = xray(cfg.sigma_a, sino.lines, orc.problem.step).values
    grid = _recon_grid(cfg)
    inv = invert_ls(sino, grid, "plain", lam=cfg.lines["lambda"], max_iters=cfg.lines["max_iters"],
                    tol=cfg.lines["cgls_tol"], step=cfg.step)
    ctx.timing["total_s"] = time.perf_counter() - t0
    tio.write_field(ctx.out / "sigma_a_field.csv", inv.field)
    tio.write_sinogram(ctx.out / "sigma_a_lines.csv", sino)
    truth = cfg.sigma_a.sample(grid)
    rep["line_relative_error_max"] = float(np.max(np.abs(sino.values - ref) / np.maximum(np.abs(ref), 1e-300)))
    rep["metrics"] = _metrics(inv.field, truth, cfg, iterations={"cgls": inv.result.iterations})
    return rep


def run_recon_sb_scatter(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    orc = _oracle(cfg)
    lines = _lineset(cfg)
    c0 = cfg.schedule["c0"]
    sino, rep = scattering_sinogram(orc, lines, _schedule(cfg), c0, cfg.schedule["aperture_resolution"],
                                    progress=lambda i, n: ctx.log(f"direction {i}/{n}"))
    rep = _strip_runtime(rep, ctx, "line_data_s")
    ref = xray(effective_attenuation_field(orc, c0), sino.lines, orc.problem.step).values
    grid = _recon_grid(cfg)
    res = recover_sigma_b_scattering(sino, cfg.sigma_a, orc.kernel, c0, grid, cfg.domain, cfg.angles,
                                     cfg.lines["lambda"], cfg.lines["max_iters"], cfg.lines["cgls_tol"], cfg.step)
    out = _finish_recon(ctx, res, cfg.sigma_b, "sigma_b")
    out["line_data"] = rep
    out["line_relative_error_max"] = float(np.max(np.abs(sino.values - ref) / np.maximum(np.abs(ref), 1e-300)))
    return out


def run_recon_k(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    if cfg.dim != 3:
        raise ConfigError("recon-k needs a 3-D domain (kind = ball3)")
    if not cfg.kpoints:
        raise ConfigError("[kpoints]: no triple.N entries")
    sched = _schedule(cfg)
    if sched.eps_x is None or sched.gamma1 is None or sched.gamma2 is None:
        raise ConfigError("[schedule]: recon-k needs eps_x, gamma1 and gamma2")
    orc = _oracle(cfg)
    rows, recs = [], []
    for i, ((x, tp, th), opts) in enumerate(cfg.kpoints):
        r = recover_k_point(orc, orc.sigma_a, x, tp, th, sched, n_a=opts["n_a"], b_resolution=opts["b_resolution"])
        tpn = np.asarray(tp) / np.linalg.norm(tp)
        thn = np.asarray(th) / np.linalg.norm(th)
        truth = float(orc.kernel(np.asarray(x)[None, :], tpn[None, :], thn[None, :])[0])
        rows.append([*x, *tpn, *thn, r.value, truth])
        recs.append({"x": list(x), "theta_p": tpn.tolist(), "theta": thn.tolist(), "value": r.value, "truth": truth,
                     "relative_error": abs(r.value - truth) / truth if truth else None, "limit": r.limit,
                     "attenuation": list(r.attenuation),
                     "reach_within_gamma2": r.diagnostics["reach_within_gamma2"]})
        ctx.log(f"triple {i + 1}/{len(cfg.kpoints)}: {r.value:.6g} (truth {truth:.6g})")
    cols = ["x", "y", "z", "tp_x", "tp_y", "tp_z", "th_x", "th_y", "th_z", "value", "truth"]
    tio.write_csv(ctx.out / "k_points.csv", cols, rows)
    return {"triples": recs, "schedule": sched.to_dict(), "solves": orc.n_solves}


def run_expansion_check(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    e = cfg.expansion
    sa, sb, k = cfg.fields()
    prob = TransportProblem(cfg.domain, sa, sb, k, angles=cfg.angles, step=cfg.step)
    f0 = SmoothSource.constant(e["c0"])
    f1 = MollifiedBeam(0.0, 1.0, e["eps"], e["theta"])
    u0, u1 = expansion_terms(prob, f0, f1)
    rows = []
    for d in e["deltas"]:
        u = joint_solution(prob, f0, f1, d)
        R = expansion_remainder(u, u0, u1, d)
        rows.append([d, R])
    tio.write_csv(ctx.out / "expansion.csv", ["delta", "R"], rows)
    ratios = [rows[i + 1][1] / rows[i][1] for i in range(len(rows) - 1) if rows[i][1] > 0]
    return {"deltas": list(e["deltas"]), "R": [r[1] for r in rows], "successive_ratios": ratios,
            "second_order": all(q <= 2.0 for q in ratios)}


RUNNERS = {"forward": run_forward, "riccati": run_riccati, "admissibility": run_admissibility,
           "recon-sa": run_recon_sa, "recon-sb": run_recon_sb, "recon-sa-scatter": run_recon_sa_scatter,
           "recon-sb-scatter": run_recon_sb_scatter, "recon-k": run_recon_k,
           "expansion-check": run_expansion_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twophoton", description="Two-photon transport forward and inverse runs.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--seed", type=int, help="random seed (overrides [run] seed)")
    p.add_argument("--threads", type=int, help="numba worker threads")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages")
    return p


def run(subcommand: str, config, out=None, seed=None, threads=None, quiet=False) -> int:
    """Execute one subcommand; returns the process exit status."""
    try:
        cfg = load_config(config)
        if seed is not None:
            if not 0 <= seed < 2**64:
                raise ConfigError("--seed: must be an unsigned 64-bit integer")
            cfg.seed = seed
            cfg.raw["run"]["seed"] = seed
        outdir = out or cfg.out
        if not outdir:
            raise ConfigError("no output directory: pass --out or set [run] out")
        if threads is not None:
            if threads < 1:
                raise ConfigError("--threads: must be >= 1")
            import numba
            numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    ctx = RunContext(cfg, Path(outdir), np.random.default_rng(cfg.seed), quiet)
    ctx.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = {"subcommand": subcommand, "config": cfg.to_dict(), "seed": cfg.seed}
    status = EXIT_OK
    try:
        report["result"] = RUNNERS[subcommand](ctx)
        report["status"] = "ok"
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except AdmissibilityError as e:
        report["status"] = "inadmissible"
        report["error"] = str(e)
        if e.report is not None:
            report["admissibility"] = e.report.to_dict()
        print(f"refused: {e}", file=sys.stderr)
        status = EXIT_INADMISSIBLE
    except ConvergenceError as e:
        report["status"] = "not converged"
        report["error"] = str(e)
        print(f"not converged: {e}", file=sys.stderr)
        status = EXIT_NOT_CONVERGED
    except (ValidationError, DomainError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # report and keep the traceback out of batch logs
        report["status"] = "failed"
        report["error"] = f"{type(e).__name__}: {e}"
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        status = EXIT_FAILURE
    ctx.timing["wall_s"] = time.perf_counter() - t0
    tio.write_json(ctx.out / "report.json", report)
    tio.write_json(ctx.out / "timing.json", ctx.timing)
    ctx.log(f"wrote {ctx.out / 'report.json'}")
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.out, args.seed, args.threads, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
