"""Line data from narrowing beams in a scattering medium.

For one beam direction, the outgoing flux through shrinking apertures is
pushed to the joint limit in beam width, strength and aperture size.  Each
recovered line integral of sigma_a is printed next to its exact value.

Run: ``python3 demos/beam_limit.py``
"""

import numpy as np

from twophoton import (AlbedoOracle, AngularGrid, Disk, GeometricSequence, Grid, LimitSchedule, PhaseFunction,
                       ScalarField, recover_effective_attenuation, xray)
from twophoton.transforms import LineSet


def main():
    d = Disk()
    grid = Grid.over(d, 48)
    sa = ScalarField.constant(grid, 0.3)
    sb = ScalarField.constant(grid, 0.05)
    k = PhaseFunction.isotropic(ScalarField.constant(grid, 0.15))
    orc = AlbedoOracle(d, sa, sb, k, angles=AngularGrid.circle(32))
    tp = np.array([1.0, 0.0])
    phi = np.linspace(-0.6, 0.6, 5)
    exits = np.column_stack([np.cos(phi), np.sin(phi)])
    # every beam width stays below half of every aperture
    sched = LimitSchedule(eps=GeometricSequence(0.0125, 0.5, 2), delta=GeometricSequence(1e-3, 0.5, 1),
                          gamma=GeometricSequence(0.05, 0.5, 2, 0))
    got = recover_effective_attenuation(orc, 0.0, tp, exits, sched)
    lines = LineSet.from_rays(d, exits - 2.0 * np.sqrt(1.0 - exits[:, 1:] ** 2) * tp, np.tile(tp, (5, 1)))
    exact = xray(sa, lines, orc.problem.step).values
    for e, g, x in zip(exits, got.values, exact):
        print(f"exit ({e[0]:+.3f}, {e[1]:+.3f}): recovered {g:.6f}  exact {x:.6f}  rel err {abs(g - x) / x:.2e}")


if __name__ == "__main__":
    main()
