"""Reconstruction pipelines driven by a synthetic albedo oracle.

* scattering-free: two collimated amplitudes per line give the attenuation
  factor exactly, hence the X-ray transform of sigma_a; the Riccati
  exit values then give the attenuated X-ray transform of sigma_b;
* with scattering: aperture averages of the exit trace of narrow beams
  give line integrals of sigma_a (beam alone) or of the effective
  attenuation sigma_a + sigma_b <w> (beam on top of a constant c0);
* in 3-D, single scattering of a spatially localized beam, integrated over
  a family of parallel exit lines, gives k pointwise.

Iterated limits are evaluated on geometric schedules with optional linear
Richardson extrapolation.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as tio
from .coefficients import (BoundarySource, CollimatedSource, MollifiedBeam, PhaseFunction, ScalarField,
                           SmoothSource, SumSource, ValidationError, PLATEAU, star_norm)
from .geometry import AngularGrid, Domain, Grid, cap_quadrature, chord_quadrature, boundary_sets
from .transforms import LineSet, Sinogram, attenuated_xray, invert_ls, xray
from .transport import (AdmissibilityError, BoundaryTrace, RadianceField, SolverSettings, TransportProblem,
                        solve_linear, solve_nonlinear, trace_on)


class DegenerateInputError(ValueError):
    """Measurement data that cannot be inverted (equal amplitudes, nonpositive exits)."""


# ---------------------------------------------------------------------------
# oracle


def _source_key(f: BoundarySource):
    if isinstance(f, SumSource):
        return ("sum",) + tuple(_source_key(p) for p in f.parts)
    d = f.to_dict()
    key = json.dumps(d, sort_keys=True, default=str)
    if isinstance(f, SmoothSource) and f.label not in ("constant", "zero"):
        return (key, id(f.func))
    if isinstance(f, CollimatedSource) and callable(f.v_minus):
        return (key, id(f.v_minus))
    if isinstance(f, MollifiedBeam):
        return (key, f.n_radial, f.n_azimuth, f.profile.scale)
    return (key,)


class AlbedoOracle:
    """The measurement map f_- -> f_+ of a fixed medium.

    Solutions are cached per source, so repeated queries are bit-identical.

    Parameters
    ----------
    domain : Domain
    sigma_a, sigma_b : ScalarField
    kernel : PhaseFunction
    grid, angles, step
        Solver discretization (see :class:`TransportProblem`).
    settings : SolverSettings
    resolution : int
        Boundary sampling used by :meth:`query`.
    """

    def __init__(self, domain: Domain, sigma_a: ScalarField, sigma_b: ScalarField, kernel: PhaseFunction,
                 grid: Grid | None = None, angles: AngularGrid | None = None, step: float | None = None,
                 settings: SolverSettings = SolverSettings(), resolution: int = 64):
        self.problem = TransportProblem(domain, sigma_a, sigma_b, kernel, grid, angles, step)
        self.settings = settings
        self.resolution = resolution
        self._cache: dict = {}
        self.n_solves = 0

    @property
    def domain(self) -> Domain:
        return self.problem.domain

    @property
    def sigma_a(self) -> ScalarField:
        return self.problem.sigma_a

    @property
    def sigma_b(self) -> ScalarField:
        return self.problem.sigma_b

    @property
    def kernel(self) -> PhaseFunction:
        return self.problem.kernel

    @property
    def scattering_free(self) -> bool:
        return self.kernel.is_zero

    def admissibility(self, f: BoundarySource):
        return self.problem.admissibility(f)

    def solve(self, f: BoundarySource, warm: RadianceField | None = None) -> RadianceField:
        """Cached nonlinear solution for ``f``.

        ``warm`` seeds the outer iteration with a nearby solution's mean.
        """
        key = _source_key(f)
        if key not in self._cache:
            m0 = None if warm is None else warm.mean
            self._cache[key] = solve_nonlinear(self.problem, f, self.settings.tol, self.settings.inner_tol,
                                               self.settings.max_outer, m_start=m0)
            self.n_solves += 1
        return self._cache[key]

    def clear(self):
        self._cache.clear()

    def query(self, f: BoundarySource) -> BoundaryTrace:
        """Outflow trace on the default boundary sampling."""
        sampling = boundary_sets(self.domain, self.problem.angles, self.resolution)
        return trace_on(self.solve(f), sampling)

    def trace(self, f: BoundarySource, points, directions, warm: RadianceField | None = None) -> np.ndarray:
        """Outflow values at boundary points in outgoing directions."""
        return self.solve(f, warm).trace(points, directions)

    def query_ray(self, v_minus: float, lines: LineSet, step: float | None = None) -> np.ndarray:
        """Exit values of collimated beams of amplitude ``v_minus`` along ``lines``.

        Without scattering this is the closed-form Riccati solution along
        each chord; otherwise one collimated solve per distinct direction.
        """
        if v_minus <= 0:
            raise ValidationError("beam amplitude must be positive")
        step = step or self.problem.step
        if self.scattering_free:
            A = xray(self.sigma_a, lines, step).values
            B = attenuated_xray(self.sigma_b, self.sigma_a, lines, step).values
            return np.exp(-A) / (1.0 / v_minus + B)
        out = np.empty(len(lines))
        dirs, inv = np.unique(np.round(lines.directions, 14), axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        for j, d in enumerate(dirs):
            sel = inv == j
            fld = self.solve(CollimatedSource(float(v_minus), tuple(lines.directions[sel][0])))
            out[sel] = fld.column_exit(lines.exits[sel], 0)[:, 0]
        return out


# ---------------------------------------------------------------------------
# limit schedules


@dataclass(frozen=True)
class GeometricSequence:
    """``head * ratio**k`` for ``k < levels``; ``order`` 0 reads the last value, 1 extrapolates."""

    head: float
    ratio: float = 0.5
    levels: int = 3
    order: int | None = None  # None: pipeline default
    rate: float = 1.0         # error ~ value**rate for the extrapolation

    def __post_init__(self):
        if not self.head > 0:
            raise ValidationError("sequence head must be positive")
        if not 0 < self.ratio < 1:
            raise ValidationError("sequence ratio must lie in (0, 1)")
        if self.levels < 1:
            raise ValidationError("need at least one level")
        if self.order not in (None, 0, 1):
            raise ValidationError("extrapolation order must be 0 or 1")
        if not self.rate > 0:
            raise ValidationError("extrapolation rate must be positive")

    @property
    def values(self) -> np.ndarray:
        return self.head * self.ratio ** np.arange(self.levels)

    def effective_order(self, default: int) -> int:
        order = default if self.order is None else self.order
        return order if self.levels >= 2 else 0

    def to_dict(self):
        return {"head": self.head, "ratio": self.ratio, "levels": self.levels, "order": self.order,
                "rate": self.rate, "values": self.values.tolist()}


@dataclass(frozen=True)
class LimitSchedule:
    """Sequences for the limit parameters; the 3-D ones are optional."""

    eps: GeometricSequence = GeometricSequence(0.1)
    delta: GeometricSequence = GeometricSequence(1e-2)
    gamma: GeometricSequence = GeometricSequence(0.1)
    eps_x: GeometricSequence | None = None
    gamma1: GeometricSequence | None = None
    gamma2: GeometricSequence | None = None

    def to_dict(self):
        return {k: (None if v is None else v.to_dict()) for k, v in
                (("eps", self.eps), ("delta", self.delta), ("gamma", self.gamma), ("eps_x", self.eps_x),
                 ("gamma1", self.gamma1), ("gamma2", self.gamma2))}

    @classmethod
    def default(cls, oracle: AlbedoOracle, theta_p, c0: float = 0.0, x_center=None,
                target_nu: float = 0.5) -> "LimitSchedule":
        """Heads eps = gamma = 0.1, eps_x = gamma2 = 0.1 diam, gamma1 = 0.05 diam.

        The delta head is 1e-2, reduced if needed so that nu <= ``target_nu``
        at the head.
        """
        domain = oracle.domain
        diam = domain.diameter
        eps_x = 0.1 * diam if x_center is not None else None
        delta = 1e-2
        prob = oracle.problem
        sb = float(np.max(prob.sb)) if prob.sb.size else 0.0
        if sb > 0 and prob.mu < 1:
            unit = star_norm(MollifiedBeam(0.0, 1.0, 0.1, tuple(theta_p), eps_x, x_center), domain,
                             prob.angles, prob.points)
            budget = target_nu * (1 - prob.mu) ** 2 / (prob.tau_norm * sb) - c0
            if budget <= 0:
                raise AdmissibilityError("c0 alone exhausts the admissibility budget")
            delta = min(delta, budget / unit) if unit > 0 else delta
        sched = cls(GeometricSequence(0.1), GeometricSequence(delta), GeometricSequence(0.1))
        if domain.dim == 3:
            sched = replace(sched, eps_x=GeometricSequence(0.1 * diam), gamma1=GeometricSequence(0.05 * diam),
                            gamma2=GeometricSequence(0.1 * diam))
        return sched


def extrapolate(values, params, order: int, rate: float = 1.0):
    """Limit of ``values`` (leading axis = level) as ``params -> 0``.

    Order 0 returns the last level; order 1 eliminates a term linear in
    ``params**rate`` using the last two levels.
    """
    values = np.asarray(values, dtype=float)
    if order == 0 or values.shape[0] < 2:
        return values[-1]
    p1, p2 = float(params[-2]) ** rate, float(params[-1]) ** rate
    return (values[-1] * p1 - values[-2] * p2) / (p1 - p2)


def iterated_limit(nesting, evaluate, diagnostics: dict | None = None):
    """Evaluate ``lim_{outer} ... lim_{inner} evaluate(point)``.

    ``nesting`` lists ``(names, sequence, default_order)`` outermost first;
    a tuple of names moves jointly along the same level index and is
    extrapolated in the first name's sequence.
    """
    names, seq, default_order = nesting[0]
    names = (names,) if isinstance(names, str) else tuple(names)
    seqs = seq if isinstance(seq, tuple) else (seq,)
    n = seqs[0].levels
    if any(s.levels != n for s in seqs):
        raise ValidationError(f"jointly varied parameters {names} need equal level counts")
    rows = []
    for k in range(n):
        point = {nm: float(s.values[k]) for nm, s in zip(names, seqs)}
        if len(nesting) == 1:
            rows.append(np.asarray(evaluate(point), dtype=float))
        else:
            rows.append(iterated_limit(nesting[1:], lambda p, point=point: evaluate({**point, **p}),
                                       diagnostics))
    order = seqs[0].effective_order(default_order)
    lim = extrapolate(np.stack(rows), seqs[0].values, order, seqs[0].rate)
    if diagnostics is not None:
        diagnostics.setdefault("levels", []).append(
            {"parameters": list(names), "values": [s.values.tolist() for s in seqs], "order": order,
             "level_values": np.stack(rows).tolist(), "limit": np.asarray(lim).tolist()})
    return lim


# ---------------------------------------------------------------------------
# scattering-free pipelines


def recover_mu_line(v1_exit, v2_exit, v1_in, v2_in):
    """Attenuation factor exp(-int sigma_a) from two Riccati exit values.

    ``(1/v1_in - 1/v2_in) / (1/v1_exit - 1/v2_exit)``; exact for the
    closed-form solution since ``1/v(L) = (1/v_in + B) / mu``.
    """
    v1_exit, v2_exit = np.asarray(v1_exit, dtype=float), np.asarray(v2_exit, dtype=float)
    if v1_in == v2_in:
        raise DegenerateInputError("the two input amplitudes coincide")
    if not (v1_in > 0 and v2_in > 0):
        raise DegenerateInputError("input amplitudes must be positive")
    if np.any(v1_exit <= 0) or np.any(v2_exit <= 0):
        raise DegenerateInputError("nonpositive exit value")
    den = 1.0 / v1_exit - 1.0 / v2_exit
    if np.any(den == 0):
        raise DegenerateInputError("exit values coincide")
    return (1.0 / v1_in - 1.0 / v2_in) / den


def _line_mu(v1e, v2e, v1, v2):
    # per-line attenuation factor, NaN where the data are degenerate
    out = np.full(v1e.shape, np.nan)
    ok = (v1e > 0) & (v2e > 0) & (1.0 / v1e != 1.0 / v2e)
    if np.any(ok):
        out[ok] = recover_mu_line(v1e[ok], v2e[ok], v1, v2)
    bad = ~ok | ~np.isfinite(out) | (out <= 0)
    out[bad] = np.nan
    return out


def _noisy(values, noise: float, rng):
    if noise <= 0:
        return values
    if rng is None:
        raise ValidationError("additive noise needs a random generator")
    return values + noise * rng.standard_normal(values.shape)


@dataclass
class ReconResult:
    """Reconstructed field plus the line data and a JSON-able report."""

    field: ScalarField
    data: Sinogram
    report: dict
    extras: dict = field(default_factory=dict)

    def write(self, outdir, prefix: str) -> dict:
        outdir = Path(outdir)
        paths = {"field": tio.write_field(outdir / f"{prefix}_field.csv", self.field),
                 "lines": tio.write_sinogram(outdir / f"{prefix}_lines.csv", self.data)}
        return {k: str(v) for k, v in paths.items()}


def _dropped(lines: LineSet, mask, reason: str):
    idx = np.nonzero(mask)[0]
    return [{"line": int(i), "reason": reason,
             "angle_index": None if lines.angle_index is None else int(lines.angle_index[i]),
             "offset_index": None if lines.offset_index is None else int(lines.offset_index[i])} for i in idx]


def recover_sigma_a_scatterfree(oracle: AlbedoOracle, lines: LineSet, levels=(1.0, 0.5), grid: Grid | None = None,
                                lam: float = 1e-3, max_iters: int = 200, tol: float = 1e-6,
                                step: float | None = None, noise: float = 0.0, rng=None) -> ReconResult:
    """sigma_a from two collimated amplitudes per line, then plain inversion."""
    if not oracle.scattering_free:
        raise ValidationError("scattering-free pipeline needs k = 0")
    v1, v2 = (float(v) for v in levels)
    if not v1 > v2 > 0:
        raise ValidationError("levels must satisfy v1 > v2 > 0")
    t0 = time.perf_counter()
    grid = grid or oracle.sigma_a.grid
    e1 = _noisy(oracle.query_ray(v1, lines, step), noise, rng)
    e2 = _noisy(oracle.query_ray(v2, lines, step), noise, rng)
    mu = _line_mu(e1, e2, v1, v2)
    bad = ~np.isfinite(mu)
    keep = ~bad
    data = Sinogram(lines.subset(keep), -np.log(mu[keep]))
    inv = invert_ls(data, grid, "plain", lam=lam, max_iters=max_iters, tol=tol, step=step)
    report = {"pipeline": "sigma_a scattering-free", "levels": [v1, v2], "n_lines": len(lines),
              "dropped_lines": _dropped(lines, bad, "degenerate exit data"), "noise": noise,
              "cgls": {"iterations": inv.result.iterations, "converged": inv.result.converged,
                       "lambda": inv.lam}, "runtime_s": time.perf_counter() - t0}
    return ReconResult(inv.field, data, report, {"exits": (e1, e2), "inversion": inv})


def recover_sigma_b_scatterfree(oracle: AlbedoOracle, sigma_a, lines: LineSet, v_in: float = 1.0,
                                grid: Grid | None = None, lam: float = 1e-3, max_iters: int = 200,
                                tol: float = 1e-6, step: float | None = None, noise: float = 0.0,
                                rng=None) -> ReconResult:
    """sigma_b from Riccati exits: mu/v - 1/v_in is its attenuated X-ray transform."""
    if not oracle.scattering_free:
        raise ValidationError("scattering-free pipeline needs k = 0")
    if not v_in > 0:
        raise ValidationError("v_in must be positive")
    t0 = time.perf_counter()
    grid = grid or oracle.sigma_a.grid
    step_ = step or oracle.problem.step
    v = _noisy(oracle.query_ray(v_in, lines, step), noise, rng)
    mu = np.exp(-xray(sigma_a, lines, step_).values)
    bad = ~(v > 0)
    keep = ~bad
    Ab = mu[keep] / v[keep] - 1.0 / v_in
    data = Sinogram(lines.subset(keep), Ab)
    att = sigma_a if isinstance(sigma_a, ScalarField) else ScalarField(
        grid, np.asarray(sigma_a.evaluate(grid.points()), dtype=float).reshape(grid.shape))
    inv = invert_ls(data, grid, "attenuated", attenuation=att, lam=lam, max_iters=max_iters, tol=tol, step=step)
    report = {"pipeline": "sigma_b scattering-free", "v_in": v_in, "n_lines": len(lines),
              "dropped_lines": _dropped(lines, bad, "nonpositive exit value"), "noise": noise,
              "cgls": {"iterations": inv.result.iterations, "converged": inv.result.converged,
                       "lambda": inv.lam}, "runtime_s": time.perf_counter() - t0}
    return ReconResult(inv.field, data, report, {"exits": v, "inversion": inv})


# ---------------------------------------------------------------------------
# aperture averages with scattering


def _aperture(theta_p, gamma: float, resolution: float, profile=PLATEAU):
    """Directions and weights of int . h(|theta - theta'| / gamma) dtheta."""
    n_r = max(4, int(math.ceil(gamma / resolution)))
    dirs, w = cap_quadrature(theta_p, gamma, n_r, max(8, n_r))
    d = np.linalg.norm(dirs - np.asarray(theta_p), axis=1)
    return dirs, w * profile(d / gamma)


def _outgoing_margin(domain: Domain, points, theta_p, gamma_max: float):
    # aperture directions must all leave the domain at the exit point
    n = domain.normal(points)
    amax = 2.0 * math.asin(min(gamma_max / 2.0, 1.0))
    return n @ np.asarray(theta_p) > math.sin(amax) + 1e-3


def _check_head(oracle: AlbedoOracle, f: BoundarySource):
    rep = oracle.admissibility(f)
    if not rep.passed:
        raise AdmissibilityError(f"inadmissible at the schedule head: {', '.join(rep.failures())} "
                                 f"(mu={rep.mu:.4g}, nu={rep.nu:.4g})", rep)
    return rep


@dataclass
class LineValues:
    """Recovered line integrals at exit points for one beam direction."""

    values: np.ndarray
    limits: np.ndarray
    valid: np.ndarray
    diagnostics: dict


def _beam_kw(schedule_dim, beam_resolution):
    if beam_resolution is None:
        return {}
    return {"n_radial": beam_resolution[0], "n_azimuth": beam_resolution[1]}


def recover_xray_sigma_a_scattering(oracle: AlbedoOracle, theta_p, exit_points, schedule: LimitSchedule,
                                    aperture_resolution: int = 16, beam_resolution=None) -> LineValues:
    """Line integrals of sigma_a ending at ``exit_points`` along ``theta_p``.

    For every (eps, delta) the oracle is queried once with a beam of
    direction ``theta_p``; all exit points share that solve.  The aperture
    average of u/delta is taken over ``h(|theta - theta'| / gamma)``; the
    nesting is gamma outermost, (eps, delta) jointly inside.
    """
    th = np.asarray(theta_p, dtype=float)
    th = th / np.linalg.norm(th)
    pts = np.atleast_2d(np.asarray(exit_points, dtype=float))
    kw = _beam_kw(oracle.domain.dim, beam_resolution)
    head = MollifiedBeam(0.0, schedule.delta.head, schedule.eps.head, tuple(th), **kw)
    rep = _check_head(oracle, head)
    valid = _outgoing_margin(oracle.domain, pts, th, schedule.gamma.head)
    P = pts[valid]

    def evaluate(p):
        beam = MollifiedBeam(0.0, p["delta"], p["eps"], tuple(th), **kw)
        dirs, w = _aperture(th, p["gamma"], min(p["eps"], p["gamma"]) / aperture_resolution)
        X = np.repeat(P, len(w), axis=0)
        D = np.tile(dirs, (len(P), 1))
        u = oracle.trace(beam, X, D).reshape(len(P), len(w))
        return (u / p["delta"]) @ w

    diag: dict = {"admissibility": rep.to_dict(), "schedule": schedule.to_dict()}
    limits = np.full(len(pts), np.nan)
    if len(P):
        nesting = [("gamma", schedule.gamma, 0), (("delta", "eps"), (schedule.delta, schedule.eps), 1)]
        limits[valid] = iterated_limit(nesting, evaluate, diag)
    ok = valid & (limits > 0)
    values = np.full(len(pts), np.nan)
    values[ok] = -np.log(limits[ok])
    return LineValues(values, limits, ok, diag)


def recover_effective_attenuation(oracle: AlbedoOracle, c0: float, theta_p, exit_points, schedule: LimitSchedule,
                                  aperture_resolution: int = 16, beam_resolution=None) -> LineValues:
    """Line integrals of sigma_a + sigma_b <w>, with w the solution for f = c0.

    The beam rides on the constant inflow c0; the aperture average is
    taken of (u - w)/delta, the trace of the beam response, so that the
    c0 background (whose aperture average vanishes only after gamma -> 0)
    does not swamp the finite-gamma data.  Nesting: delta outermost, then
    gamma, then eps.  Every eps level should stay below half of every gamma
    level; a beam wider than the aperture spoils the extrapolation in eps.
    """
    if c0 < 0:
        raise ValidationError("c0 must be nonnegative")
    th = np.asarray(theta_p, dtype=float)
    th = th / np.linalg.norm(th)
    pts = np.atleast_2d(np.asarray(exit_points, dtype=float))
    kw = _beam_kw(oracle.domain.dim, beam_resolution)
    head = MollifiedBeam(c0, schedule.delta.head, schedule.eps.head, tuple(th), **kw)
    rep = _check_head(oracle, head)
    valid = _outgoing_margin(oracle.domain, pts, th, schedule.gamma.head)
    P = pts[valid]
    background = oracle.solve(SmoothSource.constant(c0)) if c0 > 0 else None

    def evaluate(p):
        beam = MollifiedBeam(c0, p["delta"], p["eps"], tuple(th), **kw)
        dirs, w = _aperture(th, p["gamma"], min(p["eps"], p["gamma"]) / aperture_resolution)
        X = np.repeat(P, len(w), axis=0)
        D = np.tile(dirs, (len(P), 1))
        u = oracle.trace(beam, X, D, warm=background)
        if background is not None:
            u = u - background.trace(X, D)
        return (u.reshape(len(P), len(w)) / p["delta"]) @ w

    diag: dict = {"admissibility": rep.to_dict(), "schedule": schedule.to_dict(), "c0": c0}
    limits = np.full(len(pts), np.nan)
    if len(P):
        nesting = [("delta", schedule.delta, 0), ("gamma", schedule.gamma, 0), ("eps", schedule.eps, 1)]
        limits[valid] = iterated_limit(nesting, evaluate, diag)
    ok = valid & (limits > 0)
    values = np.full(len(pts), np.nan)
    values[ok] = -np.log(limits[ok])
    return LineValues(values, limits, ok, diag)


def effective_attenuation_field(oracle: AlbedoOracle, c0: float) -> ScalarField:
    """sigma_a + sigma_b |<w>| on the oracle's grid (forward reference)."""
    prob = oracle.problem
    w = oracle.solve(SmoothSource.constant(c0)) if c0 > 0 else None
    m = np.zeros(prob.n_points) if w is None else w.mean
    return ScalarField(prob.grid, prob.full(prob.sa + prob.sb * np.abs(m)).reshape(prob.grid.shape))


def scattering_sinogram(oracle: AlbedoOracle, lines: LineSet, schedule: LimitSchedule, c0: float | None = None,
                        aperture_resolution: int = 16, progress=None) -> tuple[Sinogram, dict]:
    """Line values for every line of ``lines`` (one beam solve per direction).

    ``c0=None`` recovers the X-ray transform of sigma_a; a number recovers
    the line integrals of the effective attenuation.
    """
    t0 = time.perf_counter()
    dirs, inv = np.unique(np.round(lines.directions, 14), axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    values = np.full(len(lines), np.nan)
    per_dir = []
    for j in range(len(dirs)):
        sel = np.nonzero(inv == j)[0]
        th = lines.directions[sel[0]]
        if c0 is None:
            r = recover_xray_sigma_a_scattering(oracle, th, lines.exits[sel], schedule, aperture_resolution)
        else:
            r = recover_effective_attenuation(oracle, c0, th, lines.exits[sel], schedule, aperture_resolution)
        values[sel] = r.values
        per_dir.append({"direction": th.tolist(), "n_lines": int(sel.size), "n_valid": int(r.valid.sum()),
                        "levels": r.diagnostics.get("levels", [])[-1:]})
        if progress:
            progress(j + 1, len(dirs))
    bad = ~np.isfinite(values)
    keep = ~bad
    sino = Sinogram(lines.subset(keep), values[keep])
    report = {"n_lines": len(lines), "n_directions": len(dirs), "schedule": schedule.to_dict(),
              "c0": c0, "dropped_lines": _dropped(lines, bad, "aperture not outgoing or nonpositive limit"),
              "solves": oracle.n_solves, "runtime_s": time.perf_counter() - t0, "per_direction": per_dir}
    return sino, report


def recover_sigma_b_scattering(data: Sinogram, sigma_a, kernel: PhaseFunction, c0: float, grid: Grid,
                               domain: Domain, angles: AngularGrid | None = None, lam: float = 1e-3,
                               max_iters: int = 200, tol: float = 1e-6, step: float | None = None,
                               solver_tol: float = 1e-12, mismatch_fraction: float = 0.05) -> ReconResult:
    """sigma_b from line integrals of the effective attenuation S.

    S is inverted from the line data; w solves the linear equation with
    total attenuation S, scattering ``kernel`` and inflow c0; then
    ``sigma_b = (S - sigma_a) / max(<w>, C c0)`` clamped at zero, with C the
    positivity floor ``exp(-diam (||sigma_a|| + ||sigma_b|| c0 / (1 - mu)))``
    and ||sigma_b|| bootstrapped from an unfloored first estimate.
    """
    if not c0 > 0:
        raise ValidationError("c0 must be positive")
    t0 = time.perf_counter()
    inv = invert_ls(data, grid, "plain", lam=lam, max_iters=max_iters, tol=tol, step=step)
    S = inv.field
    prob = TransportProblem(domain, S, ScalarField.zeros(grid), kernel, grid=grid, angles=angles, step=step)
    if prob.mu >= 1:
        raise AdmissibilityError(f"mu = {prob.mu:.4g} >= 1")
    w = solve_linear(prob, 0.0, SmoothSource.constant(c0), tol=solver_tol)
    mean = w.mean_field()
    pts = grid.points()
    inside = domain.contains(pts).reshape(grid.shape)
    sa = np.asarray(sigma_a.evaluate(pts) if hasattr(sigma_a, "evaluate") else sigma_a, dtype=float)
    sa = sa.reshape(grid.shape)
    excess = S.values - sa
    first = np.where(inside, np.maximum(excess, 0.0) / np.maximum(mean, 1e-300), 0.0)
    sb_norm = float(first.max()) if first.size else 0.0
    sa_norm = float(np.max(sa[inside])) if inside.any() else 0.0
    C = math.exp(-domain.diameter * (sa_norm + sb_norm * c0 / (1.0 - prob.mu)))
    sb = np.where(inside, np.maximum(excess, 0.0) / np.maximum(mean, C * c0), 0.0)
    # deficit mass of S below sigma_a relative to the sigma_a mass
    deficit = float(np.sum(np.maximum(-excess, 0.0)[inside]))
    frac = deficit / max(float(np.sum(sa[inside])), 1e-300)
    flagged = frac > mismatch_fraction
    if flagged:
        warnings.warn(f"effective attenuation falls below sigma_a by {100 * frac:.1f}% of its mass",
                      RuntimeWarning)
    report = {"pipeline": "sigma_b with scattering", "c0": c0, "floor_constant": C,
              "sigma_b_norm_bootstrap": sb_norm, "mu": prob.mu, "mismatch_fraction": frac,
              "inconsistent_inputs": flagged,
              "cgls": {"iterations": inv.result.iterations, "converged": inv.result.converged, "lambda": inv.lam},
              "linear_solve": {k: v for k, v in w.diagnostics.items() if k != "inner_increments"},
              "runtime_s": time.perf_counter() - t0}
    return ReconResult(ScalarField(grid, sb), data, report, {"S": S, "mean": mean, "inversion": inv})


# ---------------------------------------------------------------------------
# pointwise k in 3-D


def _segment_integral(f, x, theta, length: float, step: float) -> float:
    s, w = chord_quadrature(length, step)
    pts = np.asarray(x)[None, :] + s[:, None] * np.asarray(theta)[None, :]
    vals = f.evaluate(pts) if hasattr(f, "evaluate") else np.full(s.size, float(f))
    return float(w @ vals)


def _phi1(t, profile=PLATEAU):
    # 1-D mollifier with unit integral
    return profile(np.abs(t)) / profile.flat_integral(1)


@dataclass
class KPoint:
    value: float
    limit: float
    attenuation: tuple
    diagnostics: dict


def recover_k_point(oracle: AlbedoOracle, sigma_a, x, theta_p, theta, schedule: LimitSchedule,
                    n_a: int = 24, b_resolution: float = 6.0, beam_resolution=(4, 8)) -> KPoint:
    """k(x, theta', theta) from single scattering of a localized beam.

    The beam enters at x' = x - tau_-(x, theta') theta' along theta'.  The
    exit trace in direction theta is integrated over the parallel lines
    ``x + a e_a + b nu + t theta`` (e_a in span(theta, theta') orthogonal to
    theta, nu normal to that plane) against
    ``(1/gamma1) phi(a / (gamma1 theta'.e_a)) h(|b| / gamma2)``; this picks
    out the scattering event at x as gamma1 -> 0 while gamma2 -> 0 removes
    multiple scattering.  The limit is divided by the sigma_a attenuation
    factors along both legs.
    """
    domain = oracle.domain
    if domain.dim != 3:
        raise ValidationError("pointwise k recovery is 3-D")
    if schedule.eps_x is None or schedule.gamma1 is None or schedule.gamma2 is None:
        raise ValidationError("schedule needs eps_x, gamma1 and gamma2")
    x = np.asarray(x, dtype=float)
    tp = np.asarray(theta_p, dtype=float)
    tp = tp / np.linalg.norm(tp)
    t = np.asarray(theta, dtype=float)
    t = t / np.linalg.norm(t)
    if abs(float(tp @ t)) >= 1 - 1e-6:
        raise ValidationError("theta and theta' must not be parallel")
    if not bool(domain.contains(x[None, :], tol=-1e-12)[0]):
        raise ValidationError("x must be an interior point")
    step = oracle.problem.step
    tau_m = float(domain.exit_time(x, tp, -1))
    tau_p = float(domain.exit_time(x, t, +1))
    x_minus = x - tau_m * tp
    e_a = tp - (tp @ t) * t
    sin_a = float(np.linalg.norm(e_a))
    e_a /= sin_a
    nu = np.cross(t, tp)
    nu /= np.linalg.norm(nu)
    kw = {"n_radial": beam_resolution[0], "n_azimuth": beam_resolution[1]}

    head = MollifiedBeam(0.0, schedule.delta.head, schedule.eps.head, tuple(tp), schedule.eps_x.head,
                         tuple(x_minus), **kw)
    rep = _check_head(oracle, head)
    reach = schedule.eps_x.head + schedule.eps.head * domain.diameter
    separated = reach <= 0.5 * schedule.gamma2.values[-1]

    # shared exit-line family on the widest window
    g1max, g2max = schedule.gamma1.head, schedule.gamma2.head
    a_half = g1max * sin_a
    da = 2 * a_half / n_a
    a = -a_half + (np.arange(n_a) + 0.5) * da
    fine = min(schedule.eps_x.values[-1], schedule.gamma2.values[-1]) / b_resolution
    n_b = int(math.ceil(2 * g2max / fine))
    db = 2 * g2max / n_b
    b = -g2max + (np.arange(n_b) + 0.5) * db
    A, B = np.meshgrid(a, b, indexing="ij")
    base = x + A.reshape(-1, 1) * e_a + B.reshape(-1, 1) * nu
    t0, t1 = domain.clip_line(base, np.broadcast_to(t, base.shape))
    inside = t1 > t0 + 1e-12
    exits = base + t1[:, None] * t
    # traces depend on the exit-line family as well as on the beam
    lines_key = hashlib.sha1(np.ascontiguousarray(np.r_[exits.reshape(-1), t]).tobytes()).hexdigest()

    def evaluate(p):
        beam = MollifiedBeam(0.0, p["delta"], p["eps"], tuple(tp), p["eps_x"], tuple(x_minus), **kw)
        key = ("k-trace", _source_key(beam), lines_key)
        u = oracle._cache.get(key)
        if u is None:
            u = np.zeros(base.shape[0])
            u[inside] = oracle.trace(beam, exits[inside], t)
            oracle._cache[key] = u
        W = (_phi1(A / (p["gamma1"] * sin_a)) / p["gamma1"]) * PLATEAU(np.abs(B) / p["gamma2"])
        return float((W.reshape(-1) * u).sum() * da * db / p["delta"])

    diag: dict = {"admissibility": rep.to_dict(), "schedule": schedule.to_dict(), "tau_minus": tau_m,
                  "tau_plus": tau_p, "x_minus": x_minus.tolist(), "beam_reach": reach,
                  "reach_within_gamma2": separated, "exit_lines": int(inside.sum())}
    if not separated:
        warnings.warn("beam reach exceeds gamma2/2 at the last level; ballistic light may enter the window",
                      RuntimeWarning)
    nesting = [("gamma1", schedule.gamma1, 0), ("gamma2", schedule.gamma2, 0), ("eps_x", schedule.eps_x, 0),
               ("eps", schedule.eps, 0), ("delta", schedule.delta, 1)]
    lim = float(iterated_limit(nesting, evaluate, diag))
    E_out = math.exp(-_segment_integral(sigma_a, x, t, tau_p, step))
    E_in = math.exp(-_segment_integral(sigma_a, x, -tp, tau_m, step))
    return KPoint(lim / (E_out * E_in), lim, (E_out, E_in), diag)
