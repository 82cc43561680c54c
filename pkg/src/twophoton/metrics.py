"""Error metrics and run reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import ScalarField, ValidationError
from .geometry import Domain


@dataclass(frozen=True)
class RelL2:
    value: float
    absolute: bool  # truth vanished on the mask; value is ||est||_2
    mask_fraction: float


def interior_mask(grid, domain: Domain, fraction: float = 0.9) -> np.ndarray:
    """Nodes inside the domain shrunk about its bounding-box center by ``fraction``.

    ``fraction=0.9`` excludes a boundary layer of 10% of the half-width.
    """
    if not 0 < fraction <= 1:
        raise ValidationError("mask fraction must lie in (0, 1]")
    lo, hi = domain.bbox
    c = 0.5 * (lo + hi)
    pts = grid.points()
    scaled = c + (pts - c) / fraction
    return domain.contains(scaled).reshape(grid.shape)


def rel_l2(estimate: ScalarField, truth: ScalarField, domain: Domain | None = None,
           mask_fraction: float = 0.9) -> RelL2:
    """||est - truth||_2 / ||truth||_2 over the interior mask.

    A vanishing truth returns the absolute norm of the estimate, flagged.
    """
    if not estimate.grid.same_as(truth.grid):
        raise ValidationError("estimate and truth live on different grids")
    if domain is None:
        mask = np.ones(truth.grid.shape, dtype=bool)
    else:
        mask = interior_mask(truth.grid, domain, mask_fraction)
    e = estimate.values[mask]
    t = truth.values[mask]
    nt = float(np.linalg.norm(t))
    if nt == 0.0:
        return RelL2(float(np.linalg.norm(e)), True, mask_fraction)
    return RelL2(float(np.linalg.norm(e - t) / nt), False, mask_fraction)


def rel_linf(estimate: ScalarField, truth: ScalarField, domain: Domain | None = None, mask_fraction: float = 0.9):
    mask = np.ones(truth.grid.shape, bool) if domain is None else interior_mask(truth.grid, domain, mask_fraction)
    t = np.max(np.abs(truth.values[mask])) if mask.any() else 0.0
    d = np.max(np.abs(estimate.values[mask] - truth.values[mask])) if mask.any() else 0.0
    return float(d / t) if t > 0 else float(d)


@dataclass
class MetricsReport:
    rel_l2: float | None = None
    rel_linf: float | None = None
    mask_fraction: float = 0.9
    absolute: bool = False
    iterations: dict = field(default_factory=dict)
    contraction_ratios: list = field(default_factory=list)
    runtimes: dict = field(default_factory=dict)

    def to_dict(self):
        return {"rel_l2": self.rel_l2, "rel_linf": self.rel_linf, "mask": f"interior, fraction {self.mask_fraction}",
                "rel_l2_is_absolute": self.absolute, "iterations": self.iterations,
                "contraction_ratios": self.contraction_ratios, "runtimes_s": self.runtimes}
