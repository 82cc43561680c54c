"""Scattering-free reconstruction of both attenuation coefficients.

Two collimated amplitudes per line give the line integrals of sigma_a.  A
single amplitude plus the recovered sigma_a gives the attenuated transform
of sigma_b.  Data come from an oracle on a finer grid than the
reconstruction grid.

Run: ``python3 demos/scatterfree_recon.py``
"""

from twophoton import (AlbedoOracle, Disk, Grid, LineSet, Phantom, PhaseFunction, recover_sigma_a_scatterfree,
                       recover_sigma_b_scatterfree, rel_l2)

SA = Phantom(({"type": "gaussian", "center": (0.1, -0.2), "amplitude": 0.4, "width": 0.3},))
SB = Phantom(({"type": "gaussian", "center": (-0.2, 0.25), "amplitude": 0.3, "width": 0.25},))


def main():
    d = Disk()
    fine = Grid.over(d, 96)
    orc = AlbedoOracle(d, SA.sample(fine), SB.sample(fine), PhaseFunction.zero(fine))
    lines = LineSet.parallel_beam(d, 90, 90)
    grid = Grid.over(d, 48)
    ra = recover_sigma_a_scatterfree(orc, lines, (1.0, 0.5), grid)
    print(f"sigma_a: relative L2 error {rel_l2(ra.field, SA.sample(grid), d, 0.9).value:.2%}")
    rb = recover_sigma_b_scatterfree(orc, ra.field, lines, 1.0, grid)
    print(f"sigma_b: relative L2 error {rel_l2(rb.field, SB.sample(grid), d, 0.9).value:.2%}")


if __name__ == "__main__":
    main()
