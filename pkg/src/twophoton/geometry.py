"""Convex domains, ray exit times, boundary sampling and angular quadrature.

All domain queries are closed form (quadratic for disks and balls, slab
clipping for rectangles) and vectorized over leading array axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GEOM_TOL = 1e-12
TANGENT_TOL = 1e-12


class DomainError(ValueError):
    """Raised when a point lies outside the closed domain."""


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"expected points with last axis {dim}, got shape {x.shape}")
    return x


class Domain:
    """Base class for the convex domains supported by the solvers."""

    kind: str
    dim: int

    @property
    def diameter(self) -> float:
        raise NotImplementedError

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def _exit(self, x, theta) -> np.ndarray:
        raise NotImplementedError

    def normal(self, xb) -> np.ndarray:
        raise NotImplementedError

    def project(self, x) -> np.ndarray:
        """Closest point of the boundary."""
        raise NotImplementedError

    def distance_outside(self, x) -> np.ndarray:
        """Euclidean distance to the closed domain (0 inside)."""
        raise NotImplementedError

    def exit_time(self, x, theta, sign: int = 1, check: bool = True) -> np.ndarray:
        """Distance from ``x`` to the boundary along ``sign * theta``.

        ``sign=+1`` gives tau_+ and ``sign=-1`` gives tau_-.  Points must lie
        in the closed domain (within ``1e-9 * diameter``).
        """
        x = _as_points(x, self.dim)
        theta = _as_points(theta, self.dim)
        if check:
            tol = 1e-9 * self.diameter
            bad = ~self.contains(x, tol=tol)
            if np.any(bad):
                raise DomainError(f"{int(np.sum(bad))} point(s) outside the closed domain")
        d = theta if sign > 0 else -theta
        return self._exit(x, d)

    def clip_line(self, p, theta):
        """Parameters ``(t_in, t_out)`` where ``p + t theta`` crosses the boundary.

        Lines missing the domain give ``t_in >= t_out``.
        """
        raise NotImplementedError

    def chord_length(self, x, theta) -> np.ndarray:
        return self.exit_time(x, theta, 1) + self.exit_time(x, theta, -1)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class _Round(Domain):
    center: tuple
    radius: float

    def __post_init__(self):
        if len(self.center) != self.dim:
            raise ValueError(f"{self.kind} center must have {self.dim} coordinates")
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    @property
    def bbox(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius

    def contains(self, x, tol=0.0):
        x = _as_points(x, self.dim)
        r = np.linalg.norm(x - np.asarray(self.center), axis=-1)
        return r <= self.radius + tol

    def _exit(self, x, d):
        y = x - np.asarray(self.center)
        b = np.sum(y * d, axis=-1)
        c = np.sum(y * y, axis=-1) - self.radius**2
        disc = np.maximum(b * b - c, 0.0)
        # stable root of t^2 + 2 b t + c = 0 with t >= 0
        sq = np.sqrt(disc)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(b < 0, -b + sq, np.where(b + sq > 0, -c / (b + sq), 0.0))
        return np.maximum(t, 0.0)

    def clip_line(self, p, theta):
        y = _as_points(p, self.dim) - np.asarray(self.center)
        d = _as_points(theta, self.dim)
        b = np.sum(y * d, axis=-1)
        c = np.sum(y * y, axis=-1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        miss = disc <= 0
        return np.where(miss, 0.0, -b - sq), np.where(miss, 0.0, -b + sq)

    def normal(self, xb):
        y = _as_points(xb, self.dim) - np.asarray(self.center)
        return y / np.linalg.norm(y, axis=-1, keepdims=True)

    def project(self, x):
        x = _as_points(x, self.dim)
        c = np.asarray(self.center)
        y = x - c
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        r = np.where(r == 0, 1.0, r)
        return c + self.radius * y / r

    def distance_outside(self, x):
        x = _as_points(x, self.dim)
        r = np.linalg.norm(x - np.asarray(self.center), axis=-1)
        return np.maximum(r - self.radius, 0.0)

    def to_dict(self):
        return {"kind": self.kind, "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Disk(_Round):
    kind: str = field(default="disk2", init=False)
    dim: int = field(default=2, init=False)
    center: tuple = (0.0, 0.0)
    radius: float = 1.0


@dataclass(frozen=True)
class Ball(_Round):
    kind: str = field(default="ball3", init=False)
    dim: int = field(default=3, init=False)
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0


@dataclass(frozen=True)
class Rect(Domain):
    lo: tuple = (0.0, 0.0)
    hi: tuple = (1.0, 1.0)
    kind: str = field(default="rect2", init=False)
    dim: int = field(default=2, init=False)

    def __post_init__(self):
        if len(self.lo) != 2 or len(self.hi) != 2:
            raise ValueError("rect2 needs 2-D corners")
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError("rect2 requires hi > lo componentwise")

    @property
    def diameter(self):
        return float(np.hypot(*(np.asarray(self.hi) - np.asarray(self.lo))))

    @property
    def bbox(self):
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)

    def contains(self, x, tol=0.0):
        x = _as_points(x, 2)
        lo, hi = self.bbox
        return np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)

    def _exit(self, x, d):
        lo, hi = self.bbox
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = np.where(d > 0, (hi - x) / d, np.inf)
            t_lo = np.where(d < 0, (lo - x) / d, np.inf)
        t = np.min(np.minimum(t_hi, t_lo), axis=-1)
        return np.maximum(t, 0.0)

    def clip_line(self, p, theta):
        p = _as_points(p, 2)
        d = _as_points(theta, 2)
        lo, hi = self.bbox
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - p) / d
            t2 = (hi - p) / d
        tmin = np.where(d == 0, np.where((p >= lo) & (p <= hi), -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(d == 0, np.where((p >= lo) & (p <= hi), np.inf, -np.inf), np.maximum(t1, t2))
        return np.max(tmin, axis=-1), np.min(tmax, axis=-1)

    def normal(self, xb):
        # corners (measure zero) take the normal of the nearest face in index order
        xb = _as_points(xb, 2)
        lo, hi = self.bbox
        dist = np.stack([xb[..., 0] - lo[0], hi[0] - xb[..., 0],
                         xb[..., 1] - lo[1], hi[1] - xb[..., 1]], axis=-1)
        face = np.argmin(np.abs(dist), axis=-1)
        normals = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
        return normals[face]

    def project(self, x):
        x = _as_points(x, 2)
        lo, hi = self.bbox
        inside = self.contains(x)
        clipped = np.clip(x, lo, hi)
        # interior points go to the nearest face
        dist = np.stack([x[..., 0] - lo[0], hi[0] - x[..., 0],
                         x[..., 1] - lo[1], hi[1] - x[..., 1]], axis=-1)
        face = np.argmin(dist, axis=-1)
        snapped = x.copy()
        snapped[..., 0] = np.where(face == 0, lo[0], np.where(face == 1, hi[0], x[..., 0]))
        snapped[..., 1] = np.where(face == 2, lo[1], np.where(face == 3, hi[1], x[..., 1]))
        return np.where(inside[..., None], snapped, clipped)

    def distance_outside(self, x):
        x = _as_points(x, 2)
        lo, hi = self.bbox
        return np.linalg.norm(x - np.clip(x, lo, hi), axis=-1)

    def to_dict(self):
        return {"kind": self.kind, "lo": list(self.lo), "hi": list(self.hi)}


def make_domain(spec: dict) -> Domain:
    """Build a domain from ``{"kind": ..., ...}`` as used in run configs."""
    kind = spec.get("kind")
    if kind == "disk2":
        return Disk(center=tuple(spec.get("center", (0.0, 0.0))), radius=float(spec.get("radius", 1.0)))
    if kind == "ball3":
        return Ball(center=tuple(spec.get("center", (0.0, 0.0, 0.0))), radius=float(spec.get("radius", 1.0)))
    if kind == "rect2":
        return Rect(lo=tuple(spec.get("lo", (0.0, 0.0))), hi=tuple(spec.get("hi", (1.0, 1.0))))
    raise ValueError(f"unknown domain kind {kind!r}")


def exit_time(domain: Domain, x, theta, sign: int = 1) -> np.ndarray:
    """tau_+ (``sign=+1``) or tau_- (``sign=-1``) for points ``x`` and directions ``theta``."""
    return domain.exit_time(x, theta, sign)


def chord_quadrature(tau: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Uniform trapezoid nodes on ``[0, tau]`` with ``ceil(tau / h)`` intervals.

    ``tau == 0`` returns a single node with zero weight.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    tau = float(tau)
    if tau <= 0.0:
        return np.zeros(1), np.zeros(1)
    n = max(1, math.ceil(tau / h))
    t = np.linspace(0.0, tau, n + 1)
    dt = tau / n
    w = np.full(n + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return t, w


# ---------------------------------------------------------------------------
# angular quadrature


@dataclass(frozen=True, eq=False)
class AngularGrid:
    """Directions on the unit sphere with weights of the normalized measure."""

    directions: np.ndarray
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    def __len__(self):
        return self.directions.shape[0]

    def mean(self, values) -> np.ndarray:
        """Angular average over the last axis."""
        return np.asarray(values) @ self.weights

    @classmethod
    def circle(cls, n: int) -> "AngularGrid":
        """``n`` equispaced directions on S^1, offset by half a step."""
        if n < 2 or n % 2:
            raise ValueError("2-D angular grid needs an even count >= 2")
        phi = 2.0 * np.pi * (np.arange(n) + 0.5) / n
        dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        return cls(dirs, _closing_weights(np.full(n, 1.0 / n)))

    @classmethod
    def sphere(cls, n_polar: int, n_azimuth: int) -> "AngularGrid":
        """Latitude-longitude product grid with sine weights.

        Midpoint polar angles keep the grid antipodally closed when
        ``n_azimuth`` is even.
        """
        if n_polar < 1 or n_azimuth < 2 or n_azimuth % 2:
            raise ValueError("3-D angular grid needs n_polar >= 1 and an even n_azimuth")
        alpha = np.pi * (np.arange(n_polar) + 0.5) / n_polar
        beta = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
        A, B = np.meshgrid(alpha, beta, indexing="ij")
        dirs = np.stack([np.sin(A) * np.cos(B), np.sin(A) * np.sin(B), np.cos(A)], axis=-1).reshape(-1, 3)
        w = np.repeat(np.sin(alpha), n_azimuth)
        return cls(dirs, _closing_weights(w / w.sum()))

    @classmethod
    def default(cls, dim: int, n: int | None = None) -> "AngularGrid":
        if dim == 2:
            return cls.circle(n or 32)
        if dim == 3:
            n = n or 10
            return cls.sphere(n, 2 * n)
        raise ValueError("only n in {2, 3} is supported")


def _closing_weights(w: np.ndarray) -> np.ndarray:
    # last weight absorbs rounding so the index-order sum is exactly 1
    w = np.array(w, dtype=float)
    w[-1] = 1.0 - np.cumsum(w[:-1])[-1] if len(w) > 1 else 1.0
    return w


def sphere_area(dim: int) -> float:
    """Surface area of S^{dim-1}."""
    return 2.0 * np.pi ** (dim / 2) / math.gamma(dim / 2)


def tangent_frame(theta) -> np.ndarray:
    """Orthonormal basis of the plane orthogonal to a 3-D unit vector (rows)."""
    theta = np.asarray(theta, dtype=float)
    a = np.array([1.0, 0.0, 0.0]) if abs(theta[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(theta, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(theta, e1)
    return np.stack([e1, e2])


def cap_quadrature(center, radius: float, n_radial: int, n_azimuth: int = 12):
    """Midpoint quadrature of the normalized measure on ``{|theta - center| < radius}``.

    Returns directions and weights.  The chord-distance ``radius`` is
    converted to the geodesic half-angle ``2 arcsin(radius / 2)``.
    """
    center = np.asarray(center, dtype=float)
    center = center / np.linalg.norm(center)
    dim = center.size
    amax = 2.0 * np.arcsin(min(radius / 2.0, 1.0))
    if dim == 2:
        phi0 = math.atan2(center[1], center[0])
        k = np.arange(2 * n_radial)
        dphi = 2.0 * amax / (2 * n_radial)
        phi = phi0 - amax + (k + 0.5) * dphi
        dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        w = np.full(phi.size, dphi / (2.0 * np.pi))
        return dirs, w
    da = amax / n_radial
    alpha = (np.arange(n_radial) + 0.5) * da
    beta = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    e1, e2 = tangent_frame(center)
    A, B = np.meshgrid(alpha, beta, indexing="ij")
    dirs = (np.cos(A)[..., None] * center
            + (np.sin(A) * np.cos(B))[..., None] * e1
            + (np.sin(A) * np.sin(B))[..., None] * e2).reshape(-1, 3)
    w = (np.sin(A) * da * (2.0 * np.pi / n_azimuth) / (4.0 * np.pi)).reshape(-1)
    return dirs, w


# ---------------------------------------------------------------------------
# boundary sampling


@dataclass(frozen=True, eq=False)
class BoundarySampling:
    """Boundary nodes crossed with an angular grid, split into Gamma_-/Gamma_+."""

    points: np.ndarray          # (B, n)
    surface_weights: np.ndarray  # (B,)
    normals: np.ndarray          # (B, n)
    angles: AngularGrid
    cosines: np.ndarray          # (B, N)  n(x_b) . theta_j
    classification: np.ndarray   # (B, N)  -1 inflow, +1 outflow, 0 tangent

    @property
    def xi_weights(self) -> np.ndarray:
        return np.abs(self.cosines) * self.surface_weights[:, None] * self.angles.weights[None, :]

    def pairs(self, which: int):
        """Indices ``(b, j)`` of inflow (``-1``) or outflow (``+1``) pairs."""
        return np.nonzero(self.classification == which)

    def measure(self, which: int) -> float:
        return float(np.sum(self.xi_weights[self.classification == which]))


def boundary_nodes(domain: Domain, resolution: int):
    """Boundary nodes with surface weights and outer normals."""
    if resolution < 8:
        raise ValueError("boundary resolution must be >= 8")
    if isinstance(domain, Disk):
        phi = 2.0 * np.pi * (np.arange(resolution) + 0.5) / resolution
        nrm = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        pts = np.asarray(domain.center) + domain.radius * nrm
        sw = np.full(resolution, 2.0 * np.pi * domain.radius / resolution)
        return pts, sw, nrm
    if isinstance(domain, Ball):
        n_pol = resolution
        n_az = 2 * resolution
        alpha = np.pi * (np.arange(n_pol) + 0.5) / n_pol
        beta = 2.0 * np.pi * (np.arange(n_az) + 0.5) / n_az
        A, B = np.meshgrid(alpha, beta, indexing="ij")
        nrm = np.stack([np.sin(A) * np.cos(B), np.sin(A) * np.sin(B), np.cos(A)], axis=-1).reshape(-1, 3)
        pts = np.asarray(domain.center) + domain.radius * nrm
        sw = (domain.radius**2 * np.sin(A) * (np.pi / n_pol) * (2 * np.pi / n_az)).reshape(-1)
        return pts, sw, nrm
    if isinstance(domain, Rect):
        lo, hi = domain.bbox
        size = hi - lo
        per = 2 * (size[0] + size[1])
        pts, sw, nrm = [], [], []
        for axis, (length, other) in enumerate([(size[0], 1), (size[1], 0)]):
            m = max(2, int(round(resolution * length / per)))
            s = lo[axis] + (np.arange(m) + 0.5) * length / m
            for side, val in ((0, lo[other]), (1, hi[other])):
                p = np.empty((m, 2))
                p[:, axis] = s
                p[:, other] = val
                nv = np.zeros(2)
                nv[other] = -1.0 if side == 0 else 1.0
                pts.append(p)
                sw.append(np.full(m, length / m))
                nrm.append(np.tile(nv, (m, 1)))
        return np.concatenate(pts), np.concatenate(sw), np.concatenate(nrm)
    raise TypeError(f"unsupported domain {domain!r}")


def boundary_sets(domain: Domain, angles: AngularGrid, resolution: int) -> BoundarySampling:
    pts, sw, nrm = boundary_nodes(domain, resolution)
    cos = nrm @ angles.directions.T
    cls = np.where(cos > TANGENT_TOL, 1, np.where(cos < -TANGENT_TOL, -1, 0)).astype(np.int8)
    return BoundarySampling(pts, sw, nrm, angles, cos, cls)


# ---------------------------------------------------------------------------
# regular grids


@dataclass(frozen=True, eq=False)
class Grid:
    """Axis-aligned node grid (endpoints included) over a box."""

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) != self.lo.size or any(s < 2 for s in self.shape):
            raise ValueError("grid needs >= 2 nodes per axis and matching dimensions")

    @classmethod
    def over(cls, domain: Domain, n) -> "Grid":
        lo, hi = domain.bbox
        shape = (n,) * domain.dim if np.isscalar(n) else tuple(n)
        return cls(lo, hi, shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.shape) - 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axes(self):
        return [np.linspace(self.lo[d], self.hi[d], self.shape[d]) for d in range(self.dim)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def same_as(self, other: "Grid") -> bool:
        return (self.shape == other.shape and np.allclose(self.lo, other.lo, rtol=0, atol=1e-14)
                and np.allclose(self.hi, other.hi, rtol=0, atol=1e-14))

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "shape": list(self.shape)}


def interpolate(grid: Grid, values: np.ndarray, points) -> np.ndarray:
    """Multilinear interpolation of nodal ``values`` (grid shape, optional trailing axes).

    Points outside the box are clamped to it; callers that need zero
    extension mask them separately.
    """
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, grid.dim)
    h = grid.spacing
    s = (flat - grid.lo) / h
    idx = np.clip(np.floor(s).astype(np.int64), 0, np.asarray(grid.shape) - 2)
    frac = np.clip(s - idx, 0.0, 1.0)
    vals = np.asarray(values)
    trailing = vals.shape[grid.dim:]
    out = np.zeros((flat.shape[0],) + trailing)
    for corner in range(2**grid.dim):
        bits = [(corner >> d) & 1 for d in range(grid.dim)]
        w = np.ones(flat.shape[0])
        ii = []
        for d, b in enumerate(bits):
            w = w * (frac[:, d] if b else 1.0 - frac[:, d])
            ii.append(idx[:, d] + b)
        v = vals[tuple(ii)]
        out += w.reshape((-1,) + (1,) * len(trailing)) * v
    return out.reshape(pts.shape[:-1] + trailing)


def active_nodes(domain: Domain, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Nodes whose multilinear stencil can be reached from inside the domain.

    Returns the flat indices of active nodes and their evaluation points:
    the node itself when inside the closed domain, its boundary projection
    otherwise (ghost nodes).
    """
    pts = grid.points()
    reach = math.sqrt(grid.dim) * float(np.max(grid.spacing)) * (1.0 + 1e-9)
    dist = domain.distance_outside(pts)
    idx = np.nonzero(dist <= reach)[0]
    p = pts[idx]
    outside = dist[idx] > 0.0
    p[outside] = domain.project(p[outside])
    return idx, p
