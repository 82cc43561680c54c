"""Forward solve with a Gaussian absorber and the a-priori lower bound.

Solves the nonlinear transport problem for a constant inflow, prints the
contraction history and compares the smallest radiance value with the
guaranteed floor.

Run: ``python3 demos/forward_floor.py``
"""

import numpy as np

from twophoton import AngularGrid, Disk, Grid, Phantom, PhaseFunction, ScalarField, SmoothSource, TransportProblem
from twophoton import solve_nonlinear


def main():
    d = Disk()
    grid = Grid.over(d, 33)
    sa = Phantom(({"type": "gaussian", "center": (0.0, 0.0), "amplitude": 0.5, "width": 0.4},)).sample(grid)
    sb = ScalarField.constant(grid, 0.2)
    k = PhaseFunction.isotropic(ScalarField.constant(grid, 0.15))
    prob = TransportProblem(d, sa, sb, k, angles=AngularGrid.circle(16))
    f = SmoothSource.constant(1.0)
    rep = prob.admissibility(f)
    print(f"mu = {rep.mu:.3f}  nu = {rep.nu:.3f}  floor C = {rep.floor_constant:.4f}")
    u = solve_nonlinear(prob, f)
    for i, q in enumerate(u.diagnostics["contraction_ratios"], 1):
        print(f"  outer {i:2d}: ratio {q:.3e}")
    print(f"min u = {float(np.min(u.u_grid)):.4f} >= {rep.floor_constant:.4f}")


if __name__ == "__main__":
    main()
