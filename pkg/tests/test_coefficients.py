import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twophoton import (AngularGrid, Ball, BumpProfile, CollimatedSource, Disk, Grid, MollifiedBeam, Phantom,
                       PhaseFunction, ScalarField, SmoothSource, ValidationError, check_admissibility,
                       make_phantom, omega_constant, star_norm)
from twophoton.coefficients import admissibility_numbers
from twophoton.geometry import boundary_nodes

# bump integrals from 30-digit mpmath quadrature of the profiles
OMEGA = {("plateau", 2): 0.238732414637843003653, ("plateau", 3): 0.142307419385692638615,
         ("exp", 2): 0.192084152135190314097, ("exp", 3): 0.100913159419201481415}
FLAT = {("plateau", 1): 1.5, ("plateau", 2): 1.78828777317365488210,
        ("exp", 1): 1.20690032243787617534, ("exp", 2): 1.26811216112759608095}


@pytest.mark.parametrize("kind,n", sorted(OMEGA))
def test_omega_matches_frozen_quadrature(kind, n):
    h = BumpProfile(kind)
    assert h.omega(n) == pytest.approx(OMEGA[kind, n], rel=1e-12)
    assert h.flat_integral(n - 1) == pytest.approx(FLAT[kind, n - 1], rel=1e-12)


@pytest.mark.parametrize("kind,n", sorted(OMEGA))
def test_omega_small_width_limit(kind, n):
    # independent route: finite-width sphere integrals extrapolated to zero width
    est = omega_constant(BumpProfile(kind), [0.2, 0.1, 0.05], n)
    assert est.value == pytest.approx(OMEGA[kind, n], rel=1e-5)
    assert est.error < 1e-3 * est.value


@pytest.mark.parametrize("kind", ["plateau", "exp"])
def test_omega_stable_to_three_digits_in_2d(kind):
    h = BumpProfile(kind)
    coarse, fine = omega_constant(h, [0.05], 2).value, omega_constant(h, [0.025], 2).value
    assert abs(coarse - fine) <= 5e-4 * fine


def test_plateau_profile_shape():
    h = BumpProfile("plateau")
    t = np.linspace(0.0, 1.2, 241)
    v = h(t)
    assert np.all(v[t <= 0.5] == 1.0)
    assert np.all(v[t >= 1.0] == 0.0)
    assert np.all(np.diff(v) <= 0)
    assert h(-0.3) == 1.0


def test_bump_validation():
    with pytest.raises(ValidationError):
        BumpProfile("box")
    with pytest.raises(ValidationError):
        BumpProfile("plateau", 1.5)


def test_phantom_sampling_and_validation():
    g = Grid.over(Disk(), 5)
    f = make_phantom([{"type": "gaussian", "center": (0, 0), "amplitude": 0.4, "width": 0.3}], g)
    assert float(f.evaluate([0.0, 0.0])) == pytest.approx(0.4)
    disc = Phantom(({"type": "disc", "center": (0.0, 0.0), "radius": 0.5, "amplitude": 2.0},
                    {"type": "constant", "amplitude": 0.1}))
    np.testing.assert_allclose(disc.evaluate(np.array([[0.0, 0.0], [0.9, 0.0]])), [2.1, 0.1])
    for bad in ({"type": "ring"}, {"type": "gaussian", "center": (0, 0), "amplitude": -1.0, "width": 1.0},
                {"type": "gaussian", "center": (0, 0), "amplitude": 1.0, "width": 0.0},
                {"type": "disc", "center": (0, 0), "amplitude": 1.0}):
        with pytest.raises(ValidationError):
            Phantom((bad,))


def test_scalar_field_rejects_negative_and_nan():
    g = Grid.over(Disk(), 4)
    with pytest.raises(ValidationError):
        ScalarField(g, -np.ones(g.shape))
    with pytest.raises(ValidationError):
        ScalarField(g, np.full(g.shape, np.nan))


@pytest.mark.parametrize("dim,g", [(2, 0.5), (3, 0.5), (2, -0.7), (3, 0.9)])
def test_henyey_greenstein_unit_mean(dim, g):
    grid = Grid.over(Disk() if dim == 2 else Ball(), 3)
    k = PhaseFunction.henyey_greenstein(ScalarField.constant(grid, 1.0), g, dim, n_table=4001)
    ang = AngularGrid.circle(2000) if dim == 2 else AngularGrid.sphere(400, 4)
    e = np.eye(dim)[-1]  # polar axis: the 3-D integrand depends on the polar angle only
    assert k.p(ang.directions @ e) @ ang.weights == pytest.approx(1.0, rel=2e-3)


@given(eps=st.floats(0.02, 0.2), delta=st.floats(1e-4, 1.0), phi=st.floats(0.0, 2.0 * math.pi))
def test_beam_angular_mass_2d(eps, delta, phi):
    b = MollifiedBeam(0.0, delta, eps, (math.cos(phi), math.sin(phi)), n_radial=64)
    (cols,) = b.columns(Disk())
    # delta + O(eps^2)
    assert cols.weights.sum() == pytest.approx(delta, rel=eps ** 2)


def test_beam_angular_mass_3d():
    b = MollifiedBeam(0.0, 1.0, 0.05, (0.0, 0.6, 0.8), n_radial=64, n_azimuth=32)
    (cols,) = b.columns(Ball())
    assert cols.weights.sum() == pytest.approx(1.0, rel=2e-3)


def test_beam_spatial_factor_unit_flux():
    ball = Ball()
    tp = np.array([0.0, 0.0, 1.0])
    xc = (0.0, 0.0, -1.0)
    b = MollifiedBeam(0.0, 1.0, 0.1, tuple(tp), 0.05, xc)
    pts, sw, nrm = boundary_nodes(ball, 600)
    flux = np.sum(b.spatial_factor(ball)(pts) * np.abs(nrm @ tp) * sw)
    assert flux == pytest.approx(1.0, rel=5e-3)


def test_beam_validation():
    with pytest.raises(ValidationError):
        MollifiedBeam(0.0, 0.0, 0.1)
    with pytest.raises(ValidationError):
        MollifiedBeam(0.0, 1.0, 0.1, (1.0, 0.0), eps_x=0.1)
    with pytest.raises(ValidationError):
        MollifiedBeam(-1.0, 1.0, 0.1)


@given(c0=st.floats(0.0, 10.0))
def test_star_norm_of_constants(c0):
    d = Disk()
    ang = AngularGrid.circle(16)
    assert star_norm(SmoothSource.constant(c0), d, ang, 17) == pytest.approx(c0, rel=1e-12, abs=1e-300)
    assert star_norm(CollimatedSource(c0, (1.0, 0.0)), d, ang, 17) == pytest.approx(c0, rel=1e-12, abs=1e-300)


def test_admissibility_numbers_formula():
    mu, nu = admissibility_numbers(2.0, 0.1, 0.3, 1.5)
    assert mu == pytest.approx(0.2)
    assert nu == pytest.approx(2.0 * 0.3 * 1.5 / 0.8 ** 2)
    assert admissibility_numbers(2.0, 0.5, 0.3, 1.0)[1] == math.inf


def test_check_admissibility_reports_without_raising():
    d = Disk()
    g = Grid.over(d, 17)
    sa, sb = ScalarField.constant(g, 0.3), ScalarField.constant(g, 0.2)
    ok = check_admissibility(sa, sb, PhaseFunction.isotropic(ScalarField.constant(g, 0.1)),
                             SmoothSource.constant(1.0), d)
    assert ok.passed and ok.mu == pytest.approx(0.2) and ok.nu == pytest.approx(2 * 0.2 / 0.64)
    assert ok.floor_constant == pytest.approx(math.exp(-2.0 * (0.3 + 0.2 / 0.8)))
    assert ok.mean_bound == pytest.approx(1.0 / 0.8)
    bad = check_admissibility(sa, sb, PhaseFunction.isotropic(ScalarField.constant(g, 0.6)),
                              SmoothSource.constant(1.0), d)
    assert not bad.passed
    assert set(bad.failures()) == {"mu_below_one", "nu_below_one"}
    assert bad.floor_constant == 0.0
