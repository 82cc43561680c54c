"""Forward solvers for the two-photon-absorption transport equation.

The radiance is split into a ballistic part, computed exactly for each
source column along its own chord, and a scattered part carried on the
solver's angular grid.  Smooth sources live directly on the grid columns;
collimated and narrow-beam sources keep their own adapted directions, which
are appended to the angular quadrature used for the mean field.

Typical use::

    prob = TransportProblem(domain, sigma_a, sigma_b, kernel)
    u = solve_nonlinear(prob, source)
    values = u.trace(exit_points, exit_dirs)
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels as K
from .coefficients import (
    AdmissibilityReport,
    BoundarySource,
    MollifiedBeam,
    PhaseFunction,
    ScalarField,
    SourceColumns,
    SumSource,
    ValidationError,
    admissibility_numbers,
    star_norm,
)
from .geometry import (
    AngularGrid,
    Ball,
    BoundarySampling,
    Disk,
    Domain,
    Grid,
    Rect,
    active_nodes,
    boundary_sets,
    chord_quadrature,
)


class TransportError(RuntimeError):
    """Base class for solver refusals and failures."""


class AdmissibilityError(TransportError):
    """The coefficient/source tuple fails the smallness conditions."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConvergenceError(TransportError):
    """Iteration cap exceeded."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    inner_tol: float = 1e-12
    max_outer: int = 200
    max_inner: int = 5000

    def __post_init__(self):
        if not (self.tol > 0 and self.inner_tol > 0):
            raise ValidationError("tolerances must be positive")


def _domain_code(domain: Domain):
    if isinstance(domain, (Disk, Ball)):
        code = K.BALL if isinstance(domain, Ball) else K.DISK
        return code, np.array(list(domain.center) + [domain.radius], dtype=float)
    if isinstance(domain, Rect):
        return K.RECT, np.array(list(domain.lo) + list(domain.hi), dtype=float)
    raise TypeError(f"unsupported domain {domain!r}")


_EMPTY1 = np.zeros(0)
_EMPTY2 = np.zeros((1, 1))


class TransportProblem:
    """Coefficients plus discretization: node grid, angular grid, chord step.

    Parameters
    ----------
    domain : Domain
    sigma_a, sigma_b : ScalarField
        Linear and two-photon absorption.
    kernel : PhaseFunction
    grid : Grid, optional
        Solver node grid; defaults to ``sigma_a.grid``.
    angles : AngularGrid, optional
        Defaults to 32 directions in 2-D and a 10 x 20 grid in 3-D.
    step : float, optional
        Chord step; defaults to half the smallest grid spacing.
    """

    def __init__(self, domain: Domain, sigma_a: ScalarField, sigma_b: ScalarField, kernel: PhaseFunction,
                 grid: Grid | None = None, angles: AngularGrid | None = None, step: float | None = None):
        self.domain = domain
        self.sigma_a = sigma_a
        self.sigma_b = sigma_b
        self.kernel = kernel
        self.grid = grid or sigma_a.grid
        if self.grid.dim != domain.dim:
            raise ValidationError("grid and domain dimensions differ")
        self.angles = angles or AngularGrid.default(domain.dim)
        if self.angles.dim != domain.dim:
            raise ValidationError("angular grid and domain dimensions differ")
        self.step = float(step) if step is not None else 0.5 * float(np.min(self.grid.spacing))
        if not self.step > 0:
            raise ValidationError("chord step must be positive")
        self.active, self.points = active_nodes(domain, self.grid)
        self.sa = sigma_a.evaluate(self.points)
        self.sb = sigma_b.evaluate(self.points)
        self.kappa = kernel.kappa.evaluate(self.points)
        self._lo = np.asarray(self.grid.lo, dtype=float)
        self._inv_h = 1.0 / self.grid.spacing
        self._shape = np.asarray(self.grid.shape, dtype=np.int64)

    # -- sizes and norms -------------------------------------------------
    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def tau_norm(self) -> float:
        return self.domain.diameter

    @property
    def k_norm(self) -> float:
        return self.kernel.sup_norm

    @property
    def mu(self) -> float:
        return self.tau_norm * self.k_norm

    def admissibility(self, f: BoundarySource) -> AdmissibilityReport:
        fs = star_norm(f, self.domain, self.angles, self.points)
        mu, nu = admissibility_numbers(self.tau_norm, self.k_norm, self.sigma_b.max(), fs)
        clauses = {
            "sigma_a_nonnegative": True, "sigma_b_nonnegative": True, "k_nonnegative": True,
            "f_star_finite": bool(np.isfinite(fs)), "mu_below_one": bool(mu < 1), "nu_below_one": bool(nu < 1),
        }
        return AdmissibilityReport(mu, nu, self.tau_norm, self.k_norm, self.sigma_a.max(),
                                   self.sigma_b.max(), fs, clauses)

    # -- cached geometry --------------------------------------------------
    @cached_property
    def tau_main(self) -> np.ndarray:
        N = len(self.angles)
        x = np.repeat(self.points[:, None, :], N, axis=1)
        th = np.broadcast_to(self.angles.directions, x.shape)
        return self.domain.exit_time(x, th, -1, check=False)

    @cached_property
    def entry_main(self) -> np.ndarray:
        return self.points[:, None, :] - self.tau_main[..., None] * self.angles.directions[None, :, :]

    @cached_property
    def _pairs_main(self):
        P, N = self.n_points, len(self.angles)
        pp = np.repeat(np.arange(P, dtype=np.int64), N)
        pd = np.tile(np.arange(N, dtype=np.int64), P)
        return pp, pd, np.ascontiguousarray(self.tau_main.reshape(-1))

    def phase_matrix(self, dirs_in, w_in, dirs_out) -> np.ndarray:
        """``w_c * p(theta_c . theta_i)`` with shape (len(dirs_in), len(dirs_out))."""
        mu = np.asarray(dirs_in) @ np.asarray(dirs_out).T
        return np.asarray(w_in)[:, None] * self.kernel.p(mu)

    @cached_property
    def pw_main(self) -> np.ndarray:
        return self.phase_matrix(self.angles.directions, self.angles.weights, self.angles.directions)

    def full(self, node_values) -> np.ndarray:
        """Scatter active-node values (P[, c]) into a full-grid array."""
        v = np.asarray(node_values, dtype=float)
        out = np.zeros((self.grid.size,) + v.shape[1:])
        out[self.active] = v
        return np.ascontiguousarray(out)

    def total_attenuation(self, m) -> np.ndarray:
        """Nodal sigma_a + sigma_b |m| on the full grid."""
        return self.full(self.sa + self.sb * np.abs(np.asarray(m, dtype=float)))

    # -- kernel drivers ---------------------------------------------------
    def march(self, pts, dirs, pair_p, pair_d, tmax, sig_full, G=None, gcol=None,
              q_full=None, G2=None, g2col=None):
        n = len(pair_p)
        outD = np.empty(n)
        outI = np.empty(n)
        outQ = np.empty(n)
        outIQ = np.empty(n)
        G = _EMPTY2 if G is None else np.ascontiguousarray(np.asarray(G, dtype=float).T)
        gcol = np.full(n, -1, dtype=np.int64) if gcol is None else np.asarray(gcol, dtype=np.int64)
        q = _EMPTY1 if q_full is None else np.ascontiguousarray(q_full, dtype=float)
        G2 = _EMPTY2 if G2 is None else np.ascontiguousarray(np.asarray(G2, dtype=float).T)
        g2col = np.full(n, -1, dtype=np.int64) if g2col is None else np.asarray(g2col, dtype=np.int64)
        K.march(np.ascontiguousarray(pts, dtype=float), np.ascontiguousarray(dirs, dtype=float),
                np.asarray(pair_p, dtype=np.int64), np.asarray(pair_d, dtype=np.int64),
                np.ascontiguousarray(tmax, dtype=float), self._lo, self._inv_h, self._shape, self.step,
                np.ascontiguousarray(sig_full, dtype=float), G, gcol, q, G2, g2col, outD, outI, outQ, outIQ)
        return outD, outI, outQ, outIQ

    def march_main(self, sig_full, G=None, q_full=None, G2=None):
        """Chord integrals for every (node, grid direction); results shaped (P, N)."""
        pp, pd, tm = self._pairs_main
        P, N = self.n_points, len(self.angles)
        gcol = pd if G is not None else None
        g2col = pd if G2 is not None else None
        D, I, Q, IQ = self.march(self.points, self.angles.directions, pp, pd, tm, sig_full,
                                 G, gcol, q_full, G2, g2col)
        return D.reshape(P, N), I.reshape(P, N), Q.reshape(P, N), IQ.reshape(P, N)


# ---------------------------------------------------------------------------
# source preparation


@dataclass(eq=False)
class _ColumnSet:
    cols: SourceColumns
    dirs: np.ndarray
    weights: np.ndarray
    tau: np.ndarray           # (P, C)
    spatial: np.ndarray       # (P, C) boundary factor at backtraced entry points
    pw_main: np.ndarray       # (C, N)
    singular: bool            # collimated: no pointwise density
    localized: bool

    @property
    def size(self) -> int:
        return self.dirs.shape[0]


class _Prepared:
    """Source data sampled on a problem's discretization."""

    def __init__(self, prob: TransportProblem, f: BoundarySource):
        self.prob = prob
        self.source = f
        dirs = np.broadcast_to(prob.angles.directions, prob.entry_main.shape)
        self.smooth_main = f.smooth_value(prob.entry_main, dirs)
        self.sets: list[_ColumnSet] = []
        smear = 2.0 * float(np.max(prob.grid.spacing))
        for cols in f.columns(prob.domain):
            C = cols.directions.shape[0]
            if C == 0:
                continue
            x = np.repeat(prob.points[:, None, :], C, axis=1)
            th = np.broadcast_to(cols.directions, x.shape)
            tau = prob.domain.exit_time(x, th, -1, check=False)
            entry = x - tau[..., None] * th
            spatial_fn = cols.spatial
            if cols.localized and cols.beam is not None and cols.beam.eps_x < smear:
                # the grid only carries the multiply scattered part; a beam
                # narrower than the grid is represented with a widened tube
                # of the same flux
                spatial_fn = cols.beam.with_(eps_x=smear).spatial_factor(prob.domain)
            self.sets.append(_ColumnSet(
                cols, cols.directions, cols.weights, tau, spatial_fn(entry),
                prob.phase_matrix(cols.directions, cols.weights, prob.angles.directions),
                cols.density is None, cols.localized))

    @property
    def n_columns(self) -> int:
        return sum(s.size for s in self.sets)

    def directions(self) -> np.ndarray:
        return np.concatenate([self.prob.angles.directions] + [s.dirs for s in self.sets])

    def weights(self) -> np.ndarray:
        return np.concatenate([self.prob.angles.weights] + [s.weights for s in self.sets])

    def column_depths(self, sig_full, q_full=None):
        """Optical depths (and perturbation integrals) of each column set at the nodes."""
        prob = self.prob
        out = []
        P = prob.n_points
        for s in self.sets:
            pp = np.repeat(np.arange(P, dtype=np.int64), s.size)
            pd = np.tile(np.arange(s.size, dtype=np.int64), P)
            D, _, Q, _ = prob.march(prob.points, s.dirs, pp, pd, s.tau.reshape(-1), sig_full, q_full=q_full)
            out.append((D.reshape(P, s.size), Q.reshape(P, s.size) if q_full is not None else None))
        return out


# ---------------------------------------------------------------------------
# radiance fields and traces


@dataclass(eq=False)
class RadianceField:
    """Radiance at the active nodes.

    ``u`` has one column per direction in ``directions``: the solver's
    angular grid first, then the adapted directions of singular source
    parts.  ``weights`` is the matching quadrature, so ``mean == u @
    weights``.  Grid columns hold the smooth ballistic part plus all
    scattered radiance; adapted columns hold the ballistic part of the
    singular sources.
    """

    problem: TransportProblem
    u: np.ndarray
    directions: np.ndarray
    weights: np.ndarray
    mean: np.ndarray = None
    attenuation_mean: np.ndarray = None  # mean field used in the attenuation
    diagnostics: dict = field(default_factory=dict)
    _prepared: _Prepared | None = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = self.u @ self.weights
        if self.attenuation_mean is None:
            self.attenuation_mean = np.zeros(self.u.shape[0])

    @property
    def points(self) -> np.ndarray:
        return self.problem.points

    @property
    def n_grid_dirs(self) -> int:
        return len(self.problem.angles)

    @property
    def u_grid(self) -> np.ndarray:
        return self.u[:, :self.n_grid_dirs]

    def column_blocks(self):
        N = self.n_grid_dirs
        out = []
        start = N
        for s in (self._prepared.sets if self._prepared else []):
            out.append((s, self.u[:, start:start + s.size]))
            start += s.size
        return out

    def mean_field(self) -> np.ndarray:
        """Mean on the full node grid (zero at inactive nodes)."""
        return self.problem.full(self.mean).reshape(self.problem.grid.shape)

    def abs_mean(self) -> np.ndarray:
        return np.abs(self.u) @ np.abs(self.weights)

    def scattering_source(self, dirs_out, exclude_localized=False) -> np.ndarray:
        """Full-grid K u for the given outgoing directions, shape (grid size, Q)."""
        prob = self.problem
        pw = prob.phase_matrix(prob.angles.directions, prob.angles.weights, dirs_out)
        Gn = self.u_grid @ pw
        for s, block in self.column_blocks():
            if exclude_localized and s.localized:
                continue
            Gn = Gn + block @ prob.phase_matrix(s.dirs, s.weights, dirs_out)
        return prob.full(prob.kappa[:, None] * Gn)

    def path_integrals(self) -> np.ndarray:
        """sum_j w_j int_0^{tau_-} |u|(x - s theta_j, theta_j) ds at every node."""
        prob = self.problem
        zero = prob.full(np.zeros(prob.n_points))
        _, I, _, _ = prob.march_main(zero, G=prob.full(np.abs(self.u_grid)))
        total = np.abs(I) @ prob.angles.weights
        P = prob.n_points
        for s, block in self.column_blocks():
            pp = np.repeat(np.arange(P, dtype=np.int64), s.size)
            pd = np.tile(np.arange(s.size, dtype=np.int64), P)
            _, Ic, _, _ = prob.march(prob.points, s.dirs, pp, pd, s.tau.reshape(-1), zero,
                                     G=prob.full(np.abs(block)), gcol=pd)
            total = total + np.abs(Ic.reshape(P, s.size)) @ np.abs(s.weights)
        return total

    def trace(self, points, dirs) -> np.ndarray:
        """Regular part of u at boundary points ``points`` in directions ``dirs``.

        Collimated parts are singular in angle and excluded; see
        :meth:`column_exit`.
        """
        prob = self.problem
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=float)
        dirs = np.broadcast_to(dirs, pts.shape).copy()
        n = pts.shape[0]
        tau = prob.domain.exit_time(pts, dirs, -1, check=False)
        entry = pts - tau[:, None] * dirs
        udirs, inv = np.unique(np.round(dirs, 15), axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        sig = prob.total_attenuation(self.attenuation_mean)
        G = self.scattering_source(udirs, exclude_localized=True)
        D, I, _, _ = prob.march(pts, udirs, np.arange(n, dtype=np.int64), inv, tau, sig, G, inv)
        f = self._prepared.source if self._prepared else None
        ball = np.zeros(n)
        if f is not None:
            ball = f.smooth_value(entry, dirs)
            for s in self._prepared.sets:
                if s.cols.density is not None:
                    ball = ball + s.cols.density(entry, dirs)
        out = ball * np.exp(-D) + I
        if self._prepared:
            for s in self._prepared.sets:
                if s.localized:
                    out = out + _localized_single_scatter(prob, s, sig, pts, dirs, tau)
        return out

    def column_exit(self, points, set_index: int = 0) -> np.ndarray:
        """Ballistic coefficient of a column set at boundary points, shape (n, C).

        For a collimated source this is the exit value of the beam.
        """
        prob = self.problem
        s = self._prepared.sets[set_index]
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        n, C = pts.shape[0], s.size
        x = np.repeat(pts[:, None, :], C, axis=1)
        th = np.broadcast_to(s.dirs, x.shape)
        tau = prob.domain.exit_time(x, th, -1, check=False)
        entry = x - tau[..., None] * th
        pp = np.repeat(np.arange(n, dtype=np.int64), C)
        pd = np.tile(np.arange(C, dtype=np.int64), n)
        D, _, _, _ = prob.march(pts, s.dirs, pp, pd, tau.reshape(-1), prob.total_attenuation(self.attenuation_mean))
        return s.cols.spatial(entry) * np.exp(-D.reshape(n, C))

    def export_rows(self) -> tuple[list[str], np.ndarray]:
        """Rows ``(x.., theta.., weight, value)`` for CSV export."""
        P, M = self.u.shape
        dim = self.problem.dim
        X = np.repeat(self.points, M, axis=0)
        T = np.tile(self.directions, (P, 1))
        W = np.tile(self.weights, P)
        cols = ["x", "y", "z"][:dim] + ["dir_x", "dir_y", "dir_z"][:dim] + ["weight", "value"]
        return cols, np.column_stack([X, T, W, self.u.reshape(-1)])


def _localized_single_scatter(prob: TransportProblem, s: _ColumnSet, sig_full, pts, dirs, tau):
    beam: MollifiedBeam = s.cols.beam
    code, dparams = _domain_code(prob.domain)
    snorm = beam._spatial_norm(prob.domain)
    prof = K.PLATEAU if beam.profile.kind == "plateau" else K.EXPBUMP
    reach = beam.eps_x + 2.0 * beam.eps * prob.domain.diameter + 1e-12
    fine = min(prob.step, beam.eps_x / 8.0)
    out = np.empty(pts.shape[0])
    K.beam_single_scatter(pts, np.ascontiguousarray(dirs), np.ascontiguousarray(tau), prob._lo, prob._inv_h,
                          prob._shape, prob.step, fine, sig_full, prob.full(prob.kappa),
                          np.ascontiguousarray(prob.kernel.table), code, dparams,
                          np.ascontiguousarray(s.dirs), np.ascontiguousarray(s.weights * beam.profile.scale),
                          np.asarray(beam.x_center, dtype=float), np.asarray(beam.theta_p, dtype=float),
                          float(beam.eps_x), float(snorm), prof, float(reach), out)
    return out


# ---------------------------------------------------------------------------
# operators


def _ballistic(prep: _Prepared, m):
    """Grid-column and adapted-column ballistic parts for frozen mean ``m``."""
    prob = prep.prob
    sig = prob.total_attenuation(m)
    D, _, _, _ = prob.march_main(sig)
    J_grid = prep.smooth_main * np.exp(-D)
    J_cols = [s.spatial * np.exp(-Dc) for s, (Dc, _) in zip(prep.sets, prep.column_depths(sig))]
    return sig, J_grid, J_cols


def _assemble(prob, prep, grid_part, col_parts, m_att, diagnostics=None) -> RadianceField:
    u = np.concatenate([grid_part] + list(col_parts), axis=1) if col_parts else np.array(grid_part)
    return RadianceField(prob, u, prep.directions(), prep.weights(), attenuation_mean=np.array(m_att),
                         diagnostics=diagnostics or {}, _prepared=prep)


def _prepare(prob: TransportProblem, f: BoundarySource | _Prepared) -> _Prepared:
    return f if isinstance(f, _Prepared) else _Prepared(prob, f)


def apply_J(prob: TransportProblem, m, f: BoundarySource) -> RadianceField:
    """Ballistic transport J(m) f of the boundary data for frozen mean ``m``."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise ValidationError("mean field must be nonnegative")
    prep = _prepare(prob, f)
    _, Jg, Jc = _ballistic(prep, m)
    return _assemble(prob, prep, Jg, Jc, m)


def apply_H(prob: TransportProblem, m, u: RadianceField) -> RadianceField:
    """Attenuated scattering integral H(m) u on the grid directions."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise ValidationError("mean field must be nonnegative")
    sig = prob.total_attenuation(m)
    G = u.scattering_source(prob.angles.directions)
    _, I, _, _ = prob.march_main(sig, G=G)
    return RadianceField(prob, I, prob.angles.directions, prob.angles.weights,
                         attenuation_mean=np.array(m))


def _neumann(prob, prep, sig, J_grid, J_cols, tol, max_inner, start=None):
    # u_grid <- J_grid + H(u_grid, J_cols)
    if prob.kernel.is_zero:
        return J_grid.copy(), 0, []
    G_cols = np.zeros((prob.n_points, len(prob.angles)))
    for s, Jc in zip(prep.sets, J_cols):
        G_cols += Jc @ s.pw_main
    u = J_grid.copy() if start is None else J_grid + start
    incs = []
    for it in range(1, max_inner + 1):
        G = prob.full(prob.kappa[:, None] * (u @ prob.pw_main + G_cols))
        _, I, _, _ = prob.march_main(sig, G=G)
        new = J_grid + I
        inc = float(np.max(np.abs(new - u))) if u.size else 0.0
        incs.append(inc)
        u = new
        if inc <= tol:
            return u, it, incs
    raise ConvergenceError(f"Neumann iteration did not reach {tol:g} in {max_inner} sweeps",
                           {"increments": incs})


def solve_linear(prob: TransportProblem, m, f: BoundarySource, tol: float = 1e-12,
                 max_inner: int = 5000, _start=None) -> RadianceField:
    """Solve u = H(m) u + J(m) f for a frozen mean field ``m``.

    Raises
    ------
    AdmissibilityError
        If ``mu = diam * ||k|| >= 1`` (the Neumann series need not converge).
    """
    if prob.mu >= 1.0:
        raise AdmissibilityError(f"mu = {prob.mu:.4g} >= 1: Neumann series not guaranteed to converge")
    m = np.asarray(m, dtype=float) if np.ndim(m) else np.full(prob.n_points, float(m))
    prep = _prepare(prob, f)
    sig, Jg, Jc = _ballistic(prep, m)
    u, it, incs = _neumann(prob, prep, sig, Jg, Jc, tol, max_inner, _start)
    return _assemble(prob, prep, u, Jc, m, {"inner_iterations": it, "inner_increments": incs})


def mean_map(prob: TransportProblem, f: BoundarySource, m, tol: float = 1e-12) -> np.ndarray:
    """C(m) = <u(m)> with u(m) the frozen-coefficient solution."""
    return solve_linear(prob, m, f, tol).mean


def solve_nonlinear(prob: TransportProblem, f: BoundarySource, tol: float = 1e-10, inner_tol: float = 1e-12,
                    max_outer: int = 200, check: bool = True, verbose: bool = False,
                    m_start=None) -> RadianceField:
    """Fixed point m_{k+1} = <solve_linear(m_k)> from m_0 = 0.

    ``m_start`` replaces the zero start (same fixed point, fewer iterations
    when a nearby solution is known).

    The returned field carries diagnostics: outer increments, their ratios
    and the admissibility report.
    """
    report = prob.admissibility(f)
    if check and not report.passed:
        raise AdmissibilityError(f"inadmissible: {', '.join(report.failures())} "
                                 f"(mu={report.mu:.4g}, nu={report.nu:.4g})", report)
    t0 = time.perf_counter()
    prep = _prepare(prob, f)
    m = np.zeros(prob.n_points) if m_start is None else np.array(m_start, dtype=float)
    start = None
    incs: list[float] = []
    inner_total = 0
    for k in range(1, max_outer + 1):
        sig, Jg, Jc = _ballistic(prep, m)
        # inexact inner solves while the outer increment is still large
        scale = incs[-1] if incs else float(np.max(np.abs(Jg))) if Jg.size else 0.0
        tol_k = max(inner_tol, 1e-2 * scale)
        u, it, _ = _neumann(prob, prep, sig, Jg, Jc, tol_k, 5000, start)
        inner_total += it
        start = u - Jg
        field_ = _assemble(prob, prep, u, Jc, m)
        m_new = field_.mean
        inc = float(np.max(np.abs(m_new - m))) if m.size else 0.0
        incs.append(inc)
        if verbose:
            print(f"outer {k}: increment {inc:.3e}")
        m = m_new
        if inc <= tol:
            ratios = [incs[i + 1] / incs[i] for i in range(len(incs) - 1) if incs[i] > 0]
            field_.diagnostics = {
                "outer_iterations": k, "inner_iterations": inner_total, "outer_increments": incs,
                "contraction_ratios": ratios, "admissibility": report.to_dict(),
                "runtime_s": time.perf_counter() - t0,
            }
            return field_
    ratios = [incs[i + 1] / incs[i] for i in range(len(incs) - 1) if incs[i] > 0]
    raise ConvergenceError(f"outer fixed point exceeded {max_outer} iterations",
                           {"outer_increments": incs, "contraction_ratios": ratios, "nu": report.nu})


# ---------------------------------------------------------------------------
# boundary traces


@dataclass(eq=False)
class BoundaryTrace:
    """Outflow values on Gamma_+ samples with their xi-weights."""

    points: np.ndarray
    directions: np.ndarray
    values: np.ndarray
    xi_weights: np.ndarray
    collimated: list = field(default_factory=list)  # (directions, exit coefficients) per singular set

    def export_rows(self):
        dim = self.points.shape[1]
        cols = ["x", "y", "z"][:dim] + ["dir_x", "dir_y", "dir_z"][:dim] + ["xi_weight", "value"]
        return cols, np.column_stack([self.points, self.directions, self.xi_weights, self.values])


def trace_on(field_: RadianceField, sampling: BoundarySampling) -> BoundaryTrace:
    b, j = sampling.pairs(+1)
    pts = sampling.points[b]
    dirs = sampling.angles.directions[j]
    vals = field_.trace(pts, dirs)
    coll = []
    if field_._prepared:
        for i, s in enumerate(field_._prepared.sets):
            if s.singular:
                coll.append((s.dirs, field_.column_exit(sampling.points, i)))
    return BoundaryTrace(pts, dirs, vals, sampling.xi_weights[b, j], coll)


def albedo(prob: TransportProblem, f: BoundarySource, tol: float = 1e-10, resolution: int = 64,
           sampling: BoundarySampling | None = None) -> BoundaryTrace:
    """Outflow trace of the nonlinear solution on Gamma_+ samples."""
    u = solve_nonlinear(prob, f, tol)
    sampling = sampling or boundary_sets(prob.domain, prob.angles, resolution)
    return trace_on(u, sampling)


# ---------------------------------------------------------------------------
# scattering-free collimated beams


@dataclass(frozen=True, eq=False)
class RayProfile:
    """v(s) along ``x0 + s * theta0`` for s in [0, tau_+]."""

    x0: np.ndarray
    theta0: np.ndarray
    s: np.ndarray
    v: np.ndarray
    mu: np.ndarray     # exp(-int_0^s sigma_a)
    B: np.ndarray      # int_0^s mu sigma_b

    @property
    def exit_value(self) -> float:
        return float(self.v[-1])

    @property
    def length(self) -> float:
        return float(self.s[-1])


def _eval_field(f, x):
    if isinstance(f, (int, float)):
        return np.full(np.shape(x)[:-1], float(f))
    if hasattr(f, "evaluate"):
        return f.evaluate(x)
    return np.asarray(f(x), dtype=float)


def solve_riccati_ray(sigma_a, sigma_b, v0: float, x0, theta0, step: float, domain: Domain | None = None,
                      length: float | None = None) -> RayProfile:
    """Closed-form solution of v' = -sigma_a v - sigma_b v^2 along one ray.

    ``v(s) = mu(s) / (1/v0 + int_0^s mu sigma_b)`` with ``mu = exp(-int_0^s
    sigma_a)``; both integrals by the composite trapezoid rule with
    ``ceil(L / step)`` intervals.  ``sigma_a``/``sigma_b`` may be scalar
    fields, phantoms, callables or constants.  The ray length is
    ``tau_+(x0, theta0)`` unless ``length`` is given.
    """
    if v0 < 0:
        raise ValidationError("v0 must be nonnegative")
    x0 = np.asarray(x0, dtype=float)
    th = np.asarray(theta0, dtype=float)
    th = th / np.linalg.norm(th)
    if length is None:
        if domain is None:
            raise ValidationError("need a domain or an explicit ray length")
        length = float(domain.exit_time(x0, th, +1))
    # nodes measured from x0 forwards; reuse the chord rule on [0, L]
    s, _ = chord_quadrature(length, step)
    x = x0[None, :] + s[:, None] * th[None, :]
    sa = _eval_field(sigma_a, x)
    sb = _eval_field(sigma_b, x)
    ds = np.diff(s)
    A = np.concatenate([[0.0], np.cumsum(0.5 * ds * (sa[1:] + sa[:-1]))])
    mu = np.exp(-A)
    g = mu * sb
    B = np.concatenate([[0.0], np.cumsum(0.5 * ds * (g[1:] + g[:-1]))])
    if v0 == 0:
        v = np.zeros_like(s)
    else:
        v = mu / (1.0 / v0 + B)
    return RayProfile(x0, th, s, v, mu, B)


# ---------------------------------------------------------------------------
# first-order expansion in the source amplitude


def expansion_terms(prob: TransportProblem, f0: BoundarySource, f1: BoundarySource, tol: float = 1e-12,
                    inner_tol: float = 1e-13, max_iter: int = 5000) -> tuple[RadianceField, RadianceField]:
    """u0 for ``f0`` and the first-order response u1 to ``f0 + delta f1``.

    ``u1`` is the exact derivative in ``delta`` of the discrete nonlinear
    solution: it solves the linear problem with attenuation frozen at
    ``<u0>``, source ``J(<u0>) f1`` and the nonlocal term produced by the
    perturbation ``sigma_b sign(<u0>) <u1>`` of the attenuation.  Both fields
    use the column layout of ``SumSource((f0, f1))``.
    """
    for g in (f0, f1):
        if any(c.localized for c in g.columns(prob.domain)):
            raise ValidationError("expansion terms are not available for spatially localized beams")
    prep = _Prepared(prob, SumSource((f0, f1)))
    sets = prep.sets
    P, N = prob.n_points, len(prob.angles)

    # u0: nonlinear solve with f0 placed in the joint layout
    if f0.is_zero and not f0.columns(prob.domain):
        u0 = _assemble(prob, prep, np.zeros((P, N)), [np.zeros((P, s.size)) for s in sets], np.zeros(P))
    else:
        base = solve_nonlinear(prob, f0, tol=tol, inner_tol=inner_tol)
        blocks = [b for _, b in base.column_blocks()]
        cols0 = blocks + [np.zeros((P, s.size)) for s in sets[len(blocks):]]
        u0 = _assemble(prob, prep, base.u_grid, cols0, base.mean, base.diagnostics)
    m0 = u0.mean
    sig0 = prob.total_attenuation(m0)
    sgn = np.sign(m0)
    f0_main = f0.smooth_value(prob.entry_main, np.broadcast_to(prob.angles.directions, prob.entry_main.shape))
    f1_main = f1.smooth_value(prob.entry_main, np.broadcast_to(prob.angles.directions, prob.entry_main.shape))
    D0, _, _, _ = prob.march_main(sig0)
    E0 = np.exp(-D0)
    depth0 = prep.column_depths(sig0)
    is_f0 = [i < len(_Prepared(prob, f0).sets) for i in range(len(sets))]
    # ballistic response to f1 is fixed
    J1_grid = f1_main * E0
    J1_cols = [np.zeros((P, s.size)) if f0set else s.spatial * np.exp(-Dc)
               for s, (Dc, _), f0set in zip(sets, depth0, is_f0)]
    G0 = u0.scattering_source(prob.angles.directions)
    u1_grid = J1_grid.copy()
    u1_cols = [c.copy() for c in J1_cols]
    m1 = np.zeros(P)
    incs = []
    for it in range(1, max_iter + 1):
        q_full = prob.full(prob.sb * sgn * m1)
        G1 = prob.full(prob.kappa[:, None] * (u1_grid @ prob.pw_main
                                              + sum((c @ s.pw_main for s, c in zip(sets, u1_cols)),
                                                    np.zeros((P, N)))))
        _, I1, Qg, IQ = prob.march_main(sig0, G=G1, q_full=q_full, G2=G0)
        new_grid = J1_grid - f0_main * E0 * Qg + I1 - IQ
        new_cols = []
        for s, (Dc, _), (_, Qc), f0set, J1c in zip(sets, depth0, prep.column_depths(sig0, q_full), is_f0, J1_cols):
            if f0set:
                new_cols.append(-s.spatial * np.exp(-Dc) * Qc)
            else:
                new_cols.append(J1c)
        new_m1 = new_grid @ prob.angles.weights + sum((c @ s.weights for s, c in zip(sets, new_cols)), np.zeros(P))
        inc = max(float(np.max(np.abs(new_grid - u1_grid))), float(np.max(np.abs(new_m1 - m1))))
        incs.append(inc)
        u1_grid, u1_cols, m1 = new_grid, new_cols, new_m1
        if inc <= inner_tol:
            break
    else:
        raise ConvergenceError("first-order term did not converge", {"increments": incs})
    u1 = _assemble(prob, prep, u1_grid, u1_cols, m0, {"iterations": it, "increments": incs})
    return u0, u1


def joint_solution(prob: TransportProblem, f0: BoundarySource, f1: BoundarySource, delta: float,
                   tol: float = 1e-13, inner_tol: float = 1e-13) -> RadianceField:
    """Nonlinear solution for ``f0 + delta f1`` in the joint column layout."""
    return solve_nonlinear(prob, SumSource((f0, f1.scaled(delta))), tol=tol, inner_tol=inner_tol)


def expansion_remainder(u: RadianceField, u0: RadianceField, u1: RadianceField, delta: float) -> float:
    """||u - u0 - delta u1||_inf / delta^2 over grid radiance and mean field.

    Singular-source columns carry their amplitude in the quadrature weights,
    so they enter through the mean rather than as raw column values.
    """
    N = len(u.problem.angles)
    r_grid = float(np.max(np.abs(u.u[:, :N] - u0.u[:, :N] - delta * u1.u[:, :N])))
    m1 = u1.u @ u1.weights
    r_mean = float(np.max(np.abs(u.mean - u0.mean - delta * m1)))
    return max(r_grid, r_mean) / delta**2
