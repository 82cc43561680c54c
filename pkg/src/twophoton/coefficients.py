"""Coefficient fields, phantoms, boundary sources and the admissibility check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .geometry import (
    AngularGrid,
    Domain,
    Grid,
    active_nodes,
    cap_quadrature,
    interpolate,
    sphere_area,
)


class ValidationError(ValueError):
    """Invalid coefficient, phantom or source parameters."""


# ---------------------------------------------------------------------------
# scalar fields and phantoms


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nonnegative nodal values on a :class:`Grid`, multilinear in between.

    ``evaluate`` returns 0 outside the grid box.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValidationError("field values must be finite")
        if np.any(v < 0):
            raise ValidationError("field values must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        tol = 1e-12 * float(np.max(self.grid.hi - self.grid.lo))
        inside = np.all((x >= self.grid.lo - tol) & (x <= self.grid.hi + tol), axis=-1)
        return np.where(inside, interpolate(self.grid, self.values, x), 0.0)

    __call__ = evaluate

    def max(self) -> float:
        return float(self.values.max())

    def scaled(self, factor: float) -> "ScalarField":
        return ScalarField(self.grid, factor * self.values)

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))


_PRIMITIVES = {"gaussian", "disc", "constant"}


@dataclass(frozen=True)
class Phantom:
    """Sum of analytic primitives.

    Each primitive is a dict with ``type`` in ``{"gaussian", "disc",
    "constant"}``.  Gaussians are ``a * exp(-|x - c|^2 / (2 w^2))``; discs
    (balls in 3-D) take ``amplitude`` inside ``radius``.
    """

    primitives: tuple = ()

    def __post_init__(self):
        prims = tuple(dict(p) for p in self.primitives)
        for p in prims:
            kind = p.get("type")
            if kind not in _PRIMITIVES:
                raise ValidationError(f"unknown phantom primitive {kind!r}")
            amp = float(p.get("amplitude", 0.0))
            if not np.isfinite(amp) or amp < 0:
                raise ValidationError(f"{kind} amplitude must be finite and >= 0, got {amp}")
            if kind == "gaussian" and not float(p.get("width", 0)) > 0:
                raise ValidationError("gaussian width must be positive")
            if kind == "disc" and not float(p.get("radius", 0)) > 0:
                raise ValidationError("disc radius must be positive")
        object.__setattr__(self, "primitives", prims)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for p in self.primitives:
            a = float(p["amplitude"])
            if p["type"] == "constant":
                out = out + a
                continue
            c = np.asarray(p["center"], dtype=float)
            r2 = np.sum((x - c) ** 2, axis=-1)
            if p["type"] == "gaussian":
                out = out + a * np.exp(-0.5 * r2 / float(p["width"]) ** 2)
            else:
                out = out + np.where(r2 <= float(p["radius"]) ** 2, a, 0.0)
        return out

    __call__ = evaluate

    def sample(self, grid: Grid) -> ScalarField:
        return ScalarField(grid, self.evaluate(grid.points()).reshape(grid.shape))

    def scaled(self, factor: float) -> "Phantom":
        return Phantom(tuple({**p, "amplitude": factor * float(p["amplitude"])} for p in self.primitives))

    def to_list(self) -> list:
        return [dict(p) for p in self.primitives]


def make_phantom(spec: Sequence[dict] | Phantom, grid: Grid) -> ScalarField:
    """Sample a phantom specification on ``grid``.

    Examples
    --------
    >>> from twophoton.geometry import Disk, Grid
    >>> g = Grid.over(Disk(), 5)
    >>> f = make_phantom([{"type": "gaussian", "center": (0, 0), "amplitude": 0.4, "width": 0.3}], g)
    >>> float(f.evaluate([0.0, 0.0]))
    0.4
    """
    ph = spec if isinstance(spec, Phantom) else Phantom(tuple(spec))
    return ph.sample(grid)


# ---------------------------------------------------------------------------
# scattering kernel


@dataclass(frozen=True, eq=False)
class PhaseFunction:
    """k(x, theta', theta) = kappa(x) * p(theta' . theta).

    ``table`` holds p on equispaced cosines in [-1, 1] and is interpolated
    linearly.
    """

    kappa: ScalarField
    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float).reshape(-1)
        if t.size < 2:
            t = np.full(2, float(t[0]) if t.size else 0.0)
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValidationError("phase table must be finite and nonnegative")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def cosines(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.table.size)

    def p(self, mu) -> np.ndarray:
        return np.interp(np.clip(mu, -1.0, 1.0), self.cosines, self.table)

    def __call__(self, x, theta_in, theta_out) -> np.ndarray:
        mu = np.sum(np.asarray(theta_in) * np.asarray(theta_out), axis=-1)
        return self.kappa.evaluate(x) * self.p(mu)

    @property
    def sup_norm(self) -> float:
        return self.kappa.max() * float(self.table.max())

    @property
    def is_zero(self) -> bool:
        return self.sup_norm == 0.0

    @classmethod
    def isotropic(cls, kappa: ScalarField) -> "PhaseFunction":
        return cls(kappa, np.ones(2))

    @classmethod
    def zero(cls, grid: Grid) -> "PhaseFunction":
        return cls(ScalarField.zeros(grid), np.ones(2))

    @classmethod
    def henyey_greenstein(cls, kappa: ScalarField, g: float, dim: int, n_table: int = 401) -> "PhaseFunction":
        """Henyey-Greenstein table normalized to unit mean over the sphere."""
        if not -1 < g < 1:
            raise ValidationError("anisotropy g must lie in (-1, 1)")
        mu = np.linspace(-1.0, 1.0, n_table)
        if dim == 3:
            p = (1 - g * g) / (1 + g * g - 2 * g * mu) ** 1.5
        else:
            p = (1 - g * g) / (1 + g * g - 2 * g * mu)
        return cls(kappa, p)


# ---------------------------------------------------------------------------
# bump profiles and the omega constant


def _smooth_step(x):
    # C-infinity transition from 0 (x <= 0) to 1 (x >= 1)
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class BumpProfile:
    """Radial profile h(|t|) supported in the unit ball with 0 <= h <= 1.

    ``kind="plateau"`` is 1 on ``|t| <= 1/2`` and decays smoothly to 0 at
    ``|t| = 1``; ``kind="exp"`` is ``exp(1 - 1/(1 - |t|^2))``.
    """

    kind: str = "plateau"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("plateau", "exp", "zero"):
            raise ValidationError(f"unknown bump profile {self.kind!r}")
        if not 0.0 <= self.scale <= 1.0:
            raise ValidationError("bump scale must lie in [0, 1]")

    def __call__(self, t) -> np.ndarray:
        t = np.abs(np.asarray(t, dtype=float))
        if self.kind == "zero" or self.scale == 0.0:
            return np.zeros_like(t)
        if self.kind == "plateau":
            val = 1.0 - _smooth_step(2.0 * t - 1.0)
        else:
            with np.errstate(divide="ignore", over="ignore"):
                val = np.where(t < 1, np.exp(1.0 - 1.0 / np.maximum(1.0 - t * t, 1e-300)), 0.0)
        return self.scale * np.where(t < 1, val, 0.0)

    def radial_moment(self, power: int) -> float:
        """int_0^1 h(r) r^power dr."""
        val, _ = integrate.quad(lambda r: float(self(r)) * r**power, 0.0, 1.0, limit=200,
                                points=[0.5], epsabs=1e-15, epsrel=1e-13)
        return val

    def flat_integral(self, d: int) -> float:
        """Integral of h(|y|) over R^d."""
        if d == 1:
            return 2.0 * self.radial_moment(0)
        return sphere_area(d) * self.radial_moment(d - 1)

    def omega(self, n: int) -> float:
        """Small-width limit of eps^(1-n) * int h(|theta - theta'| / eps) dtheta (normalized measure)."""
        return self.flat_integral(n - 1) / sphere_area(n)


PLATEAU = BumpProfile("plateau")


def _sphere_bump_integral(h: BumpProfile, eps: float, n: int) -> float:
    # eps^(1-n) * int_{S^{n-1}} h(|theta - theta'| / eps) dtheta in the geodesic angle
    amax = 2.0 * math.asin(min(eps / 2.0, 1.0)) if eps < 2.0 else math.pi

    def chord(a):
        return 2.0 * math.sin(a / 2.0)

    if n == 2:
        f = lambda a: float(h(chord(a) / eps)) / math.pi
    elif n == 3:
        f = lambda a: float(h(chord(a) / eps)) * math.sin(a) / 2.0
    else:
        raise ValidationError("only n in {2, 3}")
    brk = [2.0 * math.asin(min(eps / 4.0, 1.0))]
    val, _ = integrate.quad(f, 0.0, amax, points=brk, limit=400, epsabs=1e-15, epsrel=1e-13)
    return val / eps ** (n - 1)


@dataclass(frozen=True)
class OmegaEstimate:
    value: float
    error: float
    levels: tuple
    samples: tuple


def omega_constant(h: BumpProfile, eps_schedule: Sequence[float], n: int) -> OmegaEstimate:
    """Extrapolate the normalized-sphere bump integral to zero width.

    The finite-width values behave like ``omega + C eps^2``; the last two
    schedule entries are combined by Richardson extrapolation and their
    spread is the error estimate.
    """
    eps = np.asarray(list(eps_schedule), dtype=float)
    if eps.size == 0 or np.any(eps <= 0):
        raise ValidationError("eps schedule must be nonempty and positive")
    if eps.size > 1 and np.any(np.diff(eps) >= 0):
        raise ValidationError("eps schedule must be strictly decreasing")
    vals = np.array([_sphere_bump_integral(h, e, n) for e in eps])
    if eps.size == 1:
        return OmegaEstimate(float(vals[0]), float("nan"), tuple(eps), tuple(vals))
    e1, e2 = eps[-2], eps[-1]
    v1, v2 = vals[-2], vals[-1]
    est = (v2 * e1**2 - v1 * e2**2) / (e1**2 - e2**2)
    return OmegaEstimate(float(est), float(abs(est - v2)), tuple(eps), tuple(vals))


# ---------------------------------------------------------------------------
# boundary sources


@dataclass(frozen=True, eq=False)
class SourceColumns:
    """Singular part of a source: discrete directions with weights.

    The boundary density restricted to these columns is
    ``weights[c] * spatial(x_b)`` in direction ``directions[c]``.
    ``support`` (center, radius) bounds the spatial factor when localized.
    """

    directions: np.ndarray
    weights: np.ndarray
    spatial: Callable[[np.ndarray], np.ndarray]
    support: tuple | None = None
    density: Callable | None = None
    beam: "MollifiedBeam | None" = None

    @property
    def localized(self) -> bool:
        return self.support is not None


class BoundarySource:
    """Inflow data f_- on Gamma_-.

    A source splits into a smooth part, evaluated on the solver's angular
    grid, and zero or more singular column sets (collimated beams and narrow
    angular beams) carried on their own adapted quadrature.
    """

    kind: str = "abstract"

    def smooth_value(self, xb, theta) -> np.ndarray:
        xb = np.asarray(xb)
        return np.zeros(xb.shape[:-1])

    def columns(self, domain: Domain) -> list[SourceColumns]:
        return []

    def value(self, xb, theta) -> np.ndarray:
        """Full boundary density (singular parts as densities where defined)."""
        return self.smooth_value(xb, theta)

    def scaled(self, factor: float) -> "BoundarySource":
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False

    def to_dict(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class SmoothSource(BoundarySource):
    """Smooth inflow ``f(x_b, theta) = scale * func(x_b, theta)``."""

    func: Callable | None = None
    scale: float = 1.0
    label: str = "smooth"
    params: dict = field(default_factory=dict)
    kind: str = "smooth"

    def __post_init__(self):
        if self.scale < 0:
            raise ValidationError("source scale must be nonnegative")

    def smooth_value(self, xb, theta):
        xb = np.asarray(xb, dtype=float)
        if self.func is None or self.scale == 0:
            return np.zeros(xb.shape[:-1])
        v = self.scale * np.broadcast_to(self.func(xb, np.asarray(theta, dtype=float)), xb.shape[:-1])
        if np.any(v < 0):
            raise ValidationError("smooth source produced negative values")
        return np.asarray(v, dtype=float)

    def scaled(self, factor):
        return SmoothSource(self.func, self.scale * factor, self.label, self.params)

    @property
    def is_zero(self):
        return self.func is None or self.scale == 0

    @classmethod
    def constant(cls, c0: float) -> "SmoothSource":
        if c0 < 0:
            raise ValidationError("c0 must be nonnegative")
        return cls(lambda x, t: np.ones(np.shape(x)[:-1]), float(c0), "constant", {"c0": float(c0)})

    @classmethod
    def zero(cls) -> "SmoothSource":
        return cls(None, 0.0, "zero")

    def to_dict(self):
        return {"kind": self.kind, "label": self.label, "scale": self.scale, **self.params}


@dataclass(frozen=True, eq=False)
class CollimatedSource(BoundarySource):
    """``f_- = v_-(x) delta_{theta0}(theta)`` carried exactly as one direction."""

    v_minus: Callable | float = 1.0
    theta0: tuple = (1.0, 0.0)
    kind: str = "collimated"

    def __post_init__(self):
        t = np.asarray(self.theta0, dtype=float)
        object.__setattr__(self, "theta0", tuple(t / np.linalg.norm(t)))
        if not callable(self.v_minus) and float(self.v_minus) < 0:
            raise ValidationError("v_minus must be nonnegative")

    def boundary_values(self, xb) -> np.ndarray:
        xb = np.asarray(xb, dtype=float)
        if callable(self.v_minus):
            v = np.asarray(self.v_minus(xb), dtype=float)
        else:
            v = np.full(xb.shape[:-1], float(self.v_minus))
        if np.any(v < 0):
            raise ValidationError("v_minus produced negative values")
        return v

    def columns(self, domain):
        return [SourceColumns(np.asarray([self.theta0]), np.ones(1), self.boundary_values)]

    def scaled(self, factor):
        if callable(self.v_minus):
            f = self.v_minus
            return CollimatedSource(lambda x: factor * f(x), self.theta0)
        return CollimatedSource(factor * float(self.v_minus), self.theta0)

    def to_dict(self):
        d = {"kind": self.kind, "theta0": list(self.theta0)}
        if not callable(self.v_minus):
            d["v_minus"] = float(self.v_minus)
        return d


@dataclass(frozen=True, eq=False)
class MollifiedBeam(BoundarySource):
    """``c0 + delta / (omega eps^{n-1}) h(|theta - theta'| / eps) * S(x)``.

    Without a spatial width ``S == 1``.  With ``eps_x`` and ``x_center`` the
    spatial factor is ``h(|x - x'| / eps_x)`` normalized to unit flux
    through the plane orthogonal to ``theta'``, i.e. divided by
    ``eps_x^{n-1} * int_{R^{n-1}} h * |n(x') . theta'|``.
    """

    c0: float = 0.0
    delta: float = 1e-3
    eps: float = 0.1
    theta_p: tuple = (1.0, 0.0)
    eps_x: float | None = None
    x_center: tuple | None = None
    profile: BumpProfile = PLATEAU
    n_radial: int = 16
    n_azimuth: int = 16
    kind: str = "beam"

    def __post_init__(self):
        if self.c0 < 0:
            raise ValidationError("c0 must be nonnegative")
        if not (self.delta > 0 and self.eps > 0):
            raise ValidationError("beam delta and eps must be positive")
        if (self.eps_x is None) != (self.x_center is None):
            raise ValidationError("eps_x and x_center must be given together")
        if self.eps_x is not None and not self.eps_x > 0:
            raise ValidationError("eps_x must be positive")
        t = np.asarray(self.theta_p, dtype=float)
        object.__setattr__(self, "theta_p", tuple(t / np.linalg.norm(t)))
        if self.x_center is not None:
            object.__setattr__(self, "x_center", tuple(float(v) for v in self.x_center))

    @property
    def dim(self) -> int:
        return len(self.theta_p)

    @property
    def omega(self) -> float:
        return self.profile.omega(self.dim)

    def angular_density(self, theta) -> np.ndarray:
        tp = np.asarray(self.theta_p)
        d = np.linalg.norm(np.asarray(theta, dtype=float) - tp, axis=-1)
        return self.delta / (self.omega * self.eps ** (self.dim - 1)) * self.profile(d / self.eps)

    def _spatial_norm(self, domain: Domain) -> float:
        xc = np.asarray(self.x_center)
        cosv = abs(float(domain.normal(xc) @ np.asarray(self.theta_p)))
        if cosv < 1e-6:
            raise ValidationError("beam center is grazing: n(x') . theta' ~ 0")
        return self.eps_x ** (self.dim - 1) * self.profile.flat_integral(self.dim - 1) * cosv

    def spatial_factor(self, domain: Domain):
        if self.eps_x is None:
            return lambda xb: np.ones(np.shape(xb)[:-1])
        xc = np.asarray(self.x_center)
        norm = self._spatial_norm(domain)
        return lambda xb: self.profile(np.linalg.norm(np.asarray(xb) - xc, axis=-1) / self.eps_x) / norm

    def smooth_value(self, xb, theta):
        return np.full(np.shape(xb)[:-1], float(self.c0))

    def columns(self, domain):
        dirs, w = cap_quadrature(self.theta_p, self.eps, self.n_radial, self.n_azimuth)
        dens = self.angular_density(dirs)
        keep = dens > 0
        support = None
        if self.eps_x is not None:
            support = (np.asarray(self.x_center), float(self.eps_x))
        spatial = self.spatial_factor(domain)
        return [SourceColumns(dirs[keep], (w * dens)[keep], spatial, support,
                              density=lambda xb, th: self.angular_density(th) * spatial(xb), beam=self)]

    def value_with_domain(self, domain, xb, theta):
        return self.c0 + self.angular_density(theta) * self.spatial_factor(domain)(xb)

    def scaled(self, factor):
        if factor <= 0:
            raise ValidationError("beam scaling factor must be positive")
        return MollifiedBeam(self.c0 * factor, self.delta * factor, self.eps, self.theta_p, self.eps_x,
                             self.x_center, self.profile, self.n_radial, self.n_azimuth)

    def with_(self, **kw) -> "MollifiedBeam":
        d = dict(c0=self.c0, delta=self.delta, eps=self.eps, theta_p=self.theta_p, eps_x=self.eps_x,
                 x_center=self.x_center, profile=self.profile, n_radial=self.n_radial, n_azimuth=self.n_azimuth)
        d.update(kw)
        return MollifiedBeam(**d)

    def to_dict(self):
        return {"kind": self.kind, "c0": self.c0, "delta": self.delta, "eps": self.eps,
                "theta_p": list(self.theta_p), "eps_x": self.eps_x,
                "x_center": None if self.x_center is None else list(self.x_center),
                "profile": self.profile.kind}


@dataclass(frozen=True, eq=False)
class SumSource(BoundarySource):
    """Superposition of sources (used for f0 + delta f1)."""

    parts: tuple = ()
    kind: str = "sum"

    def smooth_value(self, xb, theta):
        out = np.zeros(np.shape(xb)[:-1])
        for p in self.parts:
            out = out + p.smooth_value(xb, theta)
        return out

    def columns(self, domain):
        return [c for p in self.parts for c in p.columns(domain)]

    def scaled(self, factor):
        return SumSource(tuple(p.scaled(factor) for p in self.parts))

    def to_dict(self):
        return {"kind": self.kind, "parts": [p.to_dict() for p in self.parts]}


def probe_points(domain: Domain, probes) -> np.ndarray:
    """Probe points for the star norm: a count (grid nodes per axis) or explicit points."""
    if isinstance(probes, Grid):
        return active_nodes(domain, probes)[1]
    if np.isscalar(probes):
        n = int(probes)
        if n < 16:
            raise ValidationError("star norm needs at least 16 probes per axis")
        return active_nodes(domain, Grid.over(domain, n))[1]
    pts = np.asarray(probes, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != domain.dim:
        raise ValidationError("probe points must be an (m, n) array")
    return pts


def star_norm(f: BoundarySource, domain: Domain, angles: AngularGrid, probes=32) -> float:
    """max_x sum_j w_j |f(x - tau_-(x, theta_j) theta_j, theta_j)| over probe points.

    Singular column sets contribute with their own weights, a collimated
    beam with weight 1.
    """
    pts = probe_points(domain, probes)
    total = np.zeros(pts.shape[0])
    chunk = max(1, 2_000_000 // max(1, len(angles)))
    for s in range(0, pts.shape[0], chunk):
        p = pts[s:s + chunk]
        x = np.repeat(p[:, None, :], len(angles), axis=1)
        th = np.broadcast_to(angles.directions, x.shape)
        tau = domain.exit_time(x, th, -1, check=False)
        entry = x - tau[..., None] * th
        total[s:s + chunk] = np.abs(f.smooth_value(entry, th)) @ angles.weights
    for cols in f.columns(domain):
        step = max(1, 2_000_000 // max(1, len(cols.weights)))
        for s in range(0, pts.shape[0], step):
            p = pts[s:s + step]
            x = np.repeat(p[:, None, :], len(cols.weights), axis=1)
            th = np.broadcast_to(cols.directions, x.shape)
            tau = domain.exit_time(x, th, -1, check=False)
            entry = x - tau[..., None] * th
            total[s:s + step] += np.abs(cols.spatial(entry)) @ np.abs(cols.weights)
    return float(total.max()) if total.size else 0.0


# ---------------------------------------------------------------------------
# admissibility


@dataclass(frozen=True)
class AdmissibilityReport:
    mu: float
    nu: float
    tau_norm: float
    k_norm: float
    sigma_a_norm: float
    sigma_b_norm: float
    f_star: float
    clauses: dict

    @property
    def passed(self) -> bool:
        return all(self.clauses.values())

    @property
    def mean_bound(self) -> float:
        """A-priori bound ||f||_* / (1 - mu) on the angular mean."""
        return self.f_star / (1.0 - self.mu) if self.mu < 1 else math.inf

    @property
    def floor_constant(self) -> float:
        """exp(-diam (||sigma_a|| + ||sigma_b|| ||f||_* / (1 - mu)))."""
        if self.mu >= 1:
            return 0.0
        return math.exp(-self.tau_norm * (self.sigma_a_norm + self.sigma_b_norm * self.mean_bound))

    def failures(self) -> list[str]:
        return [k for k, v in self.clauses.items() if not v]

    def to_dict(self) -> dict:
        return {"mu": self.mu, "nu": self.nu, "tau_norm": self.tau_norm, "k_norm": self.k_norm,
                "sigma_a_norm": self.sigma_a_norm, "sigma_b_norm": self.sigma_b_norm,
                "f_star": self.f_star, "clauses": dict(self.clauses), "pass": self.passed,
                "floor_constant": self.floor_constant}


def admissibility_numbers(tau_norm: float, k_norm: float, sigma_b_norm: float, f_star: float) -> tuple[float, float]:
    """(mu, nu); ``nu`` is infinite when ``mu >= 1``."""
    mu = tau_norm * k_norm
    nu = tau_norm * sigma_b_norm * f_star / (1.0 - mu) ** 2 if mu < 1 else math.inf
    return mu, nu


def check_admissibility(sigma_a: ScalarField, sigma_b: ScalarField, k: PhaseFunction, f: BoundarySource,
                        domain: Domain, angles: AngularGrid | None = None, probes=None) -> AdmissibilityReport:
    """Evaluate the smallness conditions; failures are reported, never raised.

    Sup norms are grid maxima.  ``||tau||_inf`` is the domain diameter (the
    longest chord of a convex set).  Probe points default to the active
    nodes of ``sigma_a``'s grid, which is also the solver's default grid.
    """
    angles = angles or AngularGrid.default(domain.dim)
    probes = probes if probes is not None else sigma_a.grid
    tau = domain.diameter
    fs = star_norm(f, domain, angles, probes)
    kn = k.sup_norm
    sb = sigma_b.max()
    mu, nu = admissibility_numbers(tau, kn, sb, fs)
    clauses = {
        "sigma_a_nonnegative": bool(np.all(sigma_a.values >= 0)),
        "sigma_b_nonnegative": bool(np.all(sigma_b.values >= 0)),
        "k_nonnegative": bool(np.all(k.kappa.values >= 0) and np.all(k.table >= 0)),
        "f_star_finite": bool(np.isfinite(fs)),
        "mu_below_one": bool(mu < 1.0),
        "nu_below_one": bool(nu < 1.0),
    }
    return AdmissibilityReport(mu, nu, tau, kn, sigma_a.max(), sb, fs, clauses)
