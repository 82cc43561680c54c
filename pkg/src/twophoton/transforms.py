"""X-ray and attenuated X-ray transforms over line sets, and their inversion.

The discrete transform of a grid field is the trapezoid rule along each
chord applied to the multilinear interpolant, assembled once as a sparse
matrix.  Its transpose is therefore the exact adjoint used by CGLS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels as K
from .coefficients import ScalarField, ValidationError
from .geometry import Domain, Grid


@dataclass(frozen=True, eq=False)
class LineSet:
    """Oriented chords: boundary entry point, inward unit direction, length.

    ``layout`` is ``(n_angles, n_offsets)`` for parallel-beam sets, with
    ``angle_index``/``offset_index`` per line.
    """

    entries: np.ndarray
    directions: np.ndarray
    lengths: np.ndarray
    angle_index: np.ndarray | None = None
    offset_index: np.ndarray | None = None
    layout: tuple | None = None

    def __len__(self):
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def exits(self) -> np.ndarray:
        return self.entries + self.lengths[:, None] * self.directions

    def subset(self, mask) -> "LineSet":
        mask = np.asarray(mask)
        ai = None if self.angle_index is None else self.angle_index[mask]
        oi = None if self.offset_index is None else self.offset_index[mask]
        return LineSet(self.entries[mask], self.directions[mask], self.lengths[mask], ai, oi, self.layout)

    @classmethod
    def from_rays(cls, domain: Domain, points, directions) -> "LineSet":
        """Lines through ``points`` with ``directions``; entry is where each enters the domain."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        t0, t1 = domain.clip_line(p, d)
        keep = t1 > t0
        if not np.all(keep):
            raise ValidationError("some lines miss the domain")
        return cls(p + t0[:, None] * d, d, t1 - t0)

    @classmethod
    def parallel_beam(cls, domain: Domain, n_angles: int, n_offsets: int, full_circle: bool = False) -> "LineSet":
        """2-D parallel-beam chords.

        Angles are equispaced on ``[0, pi)`` (``[0, 2 pi)`` with
        ``full_circle``); offsets are cell midpoints across the domain's
        bounding circle.  Lines that miss the domain are dropped.
        """
        if domain.dim != 2:
            raise ValidationError("parallel-beam layouts are 2-D")
        if n_angles < 1 or n_offsets < 1:
            raise ValidationError("need at least one angle and one offset")
        lo, hi = domain.bbox
        c = 0.5 * (lo + hi)
        R = 0.5 * domain.diameter
        span = 2.0 * np.pi if full_circle else np.pi
        phi = span * np.arange(n_angles) / n_angles
        s = R * (-1.0 + (2.0 * np.arange(n_offsets) + 1.0) / n_offsets)
        P, S = np.meshgrid(phi, s, indexing="ij")
        th = np.stack([np.cos(P), np.sin(P)], axis=-1).reshape(-1, 2)
        perp = np.stack([-np.sin(P), np.cos(P)], axis=-1).reshape(-1, 2)
        pts = c + S.reshape(-1, 1) * perp
        t0, t1 = domain.clip_line(pts, th)
        keep = (t1 - t0) > 1e-12 * domain.diameter
        ai = np.repeat(np.arange(n_angles), n_offsets)
        oi = np.tile(np.arange(n_offsets), n_angles)
        entries = pts + t0[:, None] * th
        return cls(entries[keep], th[keep], (t1 - t0)[keep], ai[keep], oi[keep], (n_angles, n_offsets))


@dataclass(frozen=True, eq=False)
class Sinogram:
    lines: LineSet
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.lines),):
            raise ValidationError("one value per line required")
        if not np.all(np.isfinite(v)):
            raise ValidationError("sinogram values must be finite")
        object.__setattr__(self, "values", v)

    def export_rows(self):
        L = self.lines
        dim = L.dim
        n = len(L)
        ai = L.angle_index if L.angle_index is not None else np.arange(n)
        oi = L.offset_index if L.offset_index is not None else np.zeros(n, dtype=int)
        cols = (["angle_index", "offset_index"] + ["entry_x", "entry_y", "entry_z"][:dim]
                + ["dir_x", "dir_y", "dir_z"][:dim] + ["value"])
        return cols, np.column_stack([ai, oi, L.entries, L.directions, self.values])


def default_step(grid: Grid) -> float:
    return 0.5 * float(np.min(grid.spacing))


def transform_matrix(lines: LineSet, grid: Grid, step: float | None = None,
                     attenuation: ScalarField | None = None) -> sp.csr_matrix:
    """Sparse matrix of the (attenuated) trapezoid transform of multilinear grid fields."""
    if len(lines) == 0:
        raise ValidationError("empty line set")
    step = step or default_step(grid)
    if not step > 0:
        raise ValidationError("step must be positive")
    nper = np.ceil(np.maximum(lines.lengths, 0) / step).astype(np.int64) + 1
    cap = int(nper.sum()) * 2**grid.dim
    rows = np.empty(cap, dtype=np.int64)
    cols = np.empty(cap, dtype=np.int64)
    vals = np.empty(cap)
    if attenuation is None:
        att, alo, ainv, ashape = np.zeros(0), grid.lo, 1.0 / grid.spacing, np.asarray(grid.shape, dtype=np.int64)
    else:
        ag = attenuation.grid
        att = np.ascontiguousarray(attenuation.values.reshape(-1))
        alo, ainv, ashape = ag.lo, 1.0 / ag.spacing, np.asarray(ag.shape, dtype=np.int64)
    nnz = K.line_footprint(np.ascontiguousarray(lines.entries), np.ascontiguousarray(lines.directions),
                           np.ascontiguousarray(lines.lengths, dtype=float), grid.lo, 1.0 / grid.spacing,
                           np.asarray(grid.shape, dtype=np.int64), float(step), att, alo, ainv, ashape,
                           rows, cols, vals)
    A = sp.coo_matrix((vals[:nnz], (rows[:nnz], cols[:nnz])), shape=(len(lines), grid.size)).tocsr()
    A.sum_duplicates()
    return A


def _line_samples(lines: LineSet, step: float):
    # trapezoid nodes/weights for every line, flattened
    n = np.maximum(np.ceil(lines.lengths / step).astype(np.int64), 1)
    owner = np.repeat(np.arange(len(lines)), n + 1)
    k = np.concatenate([np.arange(m + 1) for m in n])
    dt = lines.lengths / n
    t = k * dt[owner]
    w = np.where((k == 0) | (k == n[owner]), 0.5, 1.0) * dt[owner]
    x = lines.entries[owner] + t[:, None] * lines.directions[owner]
    return owner, k, t, w, x


def _evaluate(f, x):
    return f.evaluate(x) if hasattr(f, "evaluate") else np.asarray(f(x), dtype=float)


def xray(f, lines: LineSet, step: float) -> Sinogram:
    """Trapezoid line integrals of ``f`` (a field, phantom or callable)."""
    return attenuated_xray(f, None, lines, step)


def attenuated_xray(f, attenuation, lines: LineSet, step: float) -> Sinogram:
    """int_0^L exp(-int_0^t attenuation) f(entry + t theta) dt per line.

    The attenuation integral is accumulated from the entry point by the
    trapezoid rule on the same nodes.
    """
    if not step > 0:
        raise ValidationError("step must be positive")
    if len(lines) == 0:
        return Sinogram(lines, np.zeros(0))
    owner, k, t, w, x = _line_samples(lines, step)
    vals = _evaluate(f, x)
    if attenuation is not None:
        a = _evaluate(attenuation, x)
        # cumulative trapezoid per line, restarted at every entry node
        prev = np.r_[0, np.arange(a.size - 1)]
        seg = np.where(k > 0, 0.5 * (t - t[prev]) * (a + a[prev]), 0.0)
        csum = np.cumsum(seg)
        start = np.nonzero(k == 0)[0]
        base = np.repeat(csum[start], np.diff(np.r_[start, a.size]))
        vals = vals * np.exp(-(csum - base))
    out = np.bincount(owner, weights=w * vals, minlength=len(lines))
    return Sinogram(lines, out)


def power_norm(A, n_steps: int = 5) -> float:
    """Estimate ||A^T A|| by a few power iterations from a constant start."""
    x = np.ones(A.shape[1]) / math.sqrt(A.shape[1])
    lam = 0.0
    for _ in range(n_steps):
        y = A.T @ (A @ x)
        lam = float(np.linalg.norm(y))
        if lam == 0:
            return 0.0
        x = y / lam
    return lam


@dataclass
class CGLSResult:
    x: np.ndarray
    iterations: int
    residuals: list = field(default_factory=list)        # ||[r; sqrt(lam) x]||
    normal_residuals: list = field(default_factory=list)  # ||A^T r - lam x||
    converged: bool = False


def cgls(A, b, lam: float = 0.0, max_iters: int = 200, tol: float = 1e-6) -> CGLSResult:
    """CGLS for min ||A x - b||^2 + lam ||x||^2 from x = 0.

    Stops when the normal-equation residual drops below ``tol`` times its
    initial value.
    """
    x = np.zeros(A.shape[1])
    r = np.asarray(b, dtype=float).copy()
    s = A.T @ r
    p = s.copy()
    gamma = float(s @ s)
    g0 = math.sqrt(gamma)
    res = [float(np.linalg.norm(r))]
    nres = [g0]
    if g0 == 0:
        return CGLSResult(x, 0, res, nres, True)
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        q = A @ p
        delta = float(q @ q) + lam * float(p @ p)
        if delta <= 0:
            break
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * q
        s = A.T @ r - lam * x
        gnew = float(s @ s)
        res.append(math.sqrt(float(r @ r) + lam * float(x @ x)))
        nres.append(math.sqrt(gnew))
        if math.sqrt(gnew) <= tol * g0:
            converged = True
            break
        p = s + (gnew / gamma) * p
        gamma = gnew
    return CGLSResult(x, it, res, nres, converged)


@dataclass
class Inversion:
    field: ScalarField
    result: CGLSResult
    lam: float
    scale: float


def invert_ls(data: Sinogram, grid: Grid, mode: str = "plain", attenuation: ScalarField | None = None,
              lam: float = 1e-3, max_iters: int = 200, tol: float = 1e-6, step: float | None = None) -> Inversion:
    """Tikhonov-regularized CGLS inversion of (attenuated) line integrals.

    The penalty is ``lam * ||A^T A||`` with the norm estimated by five power
    iterations; the result is clamped at zero.
    """
    if lam < 0:
        raise ValidationError("regularization must be nonnegative")
    if len(data.lines) == 0:
        raise ValidationError("empty line set")
    if mode not in ("plain", "attenuated"):
        raise ValidationError(f"unknown inversion mode {mode!r}")
    if mode == "attenuated" and attenuation is None:
        raise ValidationError("attenuated mode needs the attenuation field")
    A = transform_matrix(data.lines, grid, step, attenuation if mode == "attenuated" else None)
    scale = power_norm(A, 5)
    res = cgls(A, data.values, lam * scale, max_iters, tol)
    x = np.maximum(res.x, 0.0).reshape(grid.shape)
    return Inversion(ScalarField(grid, x), res, lam * scale, scale)
