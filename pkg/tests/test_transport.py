import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twophoton import (AdmissibilityError, AngularGrid, Ball, CollimatedSource, ConvergenceError, Disk, Grid,
                       MollifiedBeam, Phantom, PhaseFunction, RadianceField, ScalarField, SmoothSource,
                       TransportProblem, ValidationError, albedo, apply_H, apply_J, expansion_terms, solve_linear,
                       solve_nonlinear, solve_riccati_ray)
from twophoton.geometry import boundary_sets


def _problem(domain, n, sa, sb, kappa, angles):
    g = Grid.over(domain, n)
    return TransportProblem(domain, ScalarField.constant(g, sa), ScalarField.constant(g, sb),
                            PhaseFunction.isotropic(ScalarField.constant(g, kappa)), angles=angles)


def test_vacuum_transport_copies_inflow():
    prob = _problem(Disk(), 17, 0.0, 0.0, 0.0, AngularGrid.circle(8))
    u = solve_nonlinear(prob, SmoothSource.constant(1.7))
    np.testing.assert_array_equal(u.u_grid, 1.7)
    tr = albedo(prob, SmoothSource.constant(1.7), resolution=16)
    np.testing.assert_allclose(tr.values, 1.7, rtol=0, atol=1e-15)


@pytest.mark.parametrize("domain,n,angles", [(Disk(), 25, AngularGrid.circle(16)),
                                             (Ball(), 11, AngularGrid.sphere(4, 8))])
def test_pure_absorption_is_exponential_in_backward_distance(domain, n, angles):
    a = 0.7
    prob = _problem(domain, n, a, 0.0, 0.0, angles)
    u = solve_nonlinear(prob, SmoothSource.constant(1.0))
    x = np.repeat(prob.points[:, None, :], len(angles), axis=1)
    th = np.broadcast_to(angles.directions, x.shape)
    tau = domain.exit_time(x, th, -1, check=False)
    np.testing.assert_allclose(u.u_grid, np.exp(-a * tau), rtol=1e-12)


@given(a=st.floats(0.0, 2.0), b=st.floats(0.0, 2.0), v0=st.floats(0.1, 5.0))
@settings(max_examples=40)
def test_riccati_constant_coefficients_closed_form(a, b, v0):
    L = 1.3
    p = solve_riccati_ray(a, b, v0, np.zeros(2), np.array([1.0, 0.0]), 1e-4, length=L)
    s = p.s
    growth = b * s if a < 1e-12 else -b * np.expm1(-a * s) / a
    exact = np.exp(-a * s) / (1.0 / v0 + growth)
    np.testing.assert_allclose(p.v, exact, rtol=1e-8)
    assert p.length == pytest.approx(L)


def test_riccati_ray_zero_input_and_validation():
    p = solve_riccati_ray(0.3, 0.2, 0.0, np.array([-1.0, 0.0]), np.array([1.0, 0.0]), 0.1, Disk())
    assert p.length == pytest.approx(2.0) and np.all(p.v == 0.0)
    with pytest.raises(ValidationError):
        solve_riccati_ray(0.3, 0.2, -1.0, np.zeros(2), np.array([1.0, 0.0]), 0.1, length=1.0)
    with pytest.raises(ValidationError):
        solve_riccati_ray(0.3, 0.2, 1.0, np.zeros(2), np.array([1.0, 0.0]), 0.1)


def test_linear_solution_is_fixed_point_of_j_and_h():
    prob = _problem(Disk(), 21, 0.3, 0.1, 0.2, AngularGrid.circle(12))
    f = SmoothSource.constant(1.0)
    m = np.full(prob.n_points, 0.5)
    u = solve_linear(prob, m, f)
    # route independent of the Neumann loop: one application of J and H
    rhs = apply_J(prob, m, f).u + apply_H(prob, m, u).u
    np.testing.assert_allclose(rhs, u.u, rtol=0, atol=1e-11)


def test_linear_solve_matches_dense_collocation():
    # oracle: assemble I - H(m) column by column and solve the dense system
    prob = _problem(Disk(), 16, 0.3, 0.2, 0.2, AngularGrid.circle(16))
    ang = prob.angles
    m = np.full(prob.n_points, 0.4)
    f = SmoothSource.constant(1.0)
    J = apply_J(prob, m, f).u
    n = J.size
    H = np.empty((n, n))
    e = np.zeros(n)
    for i in range(n):
        e[:] = 0.0
        e[i] = 1.0
        H[:, i] = apply_H(prob, m, RadianceField(prob, e.reshape(J.shape), ang.directions, ang.weights)).u.ravel()
    dense = np.linalg.solve(np.eye(n) - H, J.ravel()).reshape(J.shape)
    u = solve_linear(prob, m, f, tol=1e-14)
    assert np.max(np.abs(u.u - dense) / np.abs(dense)) <= 1e-6


def test_linear_solve_refuses_mu_at_least_one():
    prob = _problem(Disk(), 13, 0.1, 0.0, 0.5, AngularGrid.circle(8))
    assert prob.mu == pytest.approx(1.0)
    with pytest.raises(AdmissibilityError):
        solve_linear(prob, 0.0, SmoothSource.constant(1.0))


def test_nonlinear_refuses_inadmissible_and_reports_nonconvergence():
    prob = _problem(Disk(), 13, 0.1, 2.0, 0.1, AngularGrid.circle(8))
    with pytest.raises(AdmissibilityError) as e:
        solve_nonlinear(prob, SmoothSource.constant(1.0))
    assert "nu_below_one" in str(e.value)
    ok = _problem(Disk(), 13, 0.1, 0.2, 0.1, AngularGrid.circle(8))
    with pytest.raises(ConvergenceError):
        solve_nonlinear(ok, SmoothSource.constant(1.0), max_outer=2)


def test_solve_is_bit_reproducible_and_contracts():
    prob = _problem(Disk(), 21, 0.3, 0.3, 0.15, AngularGrid.circle(12))
    f = MollifiedBeam(0.5, 0.2, 0.3, (0.6, 0.8))
    u1 = solve_nonlinear(prob, f)
    u2 = solve_nonlinear(prob, f)
    np.testing.assert_array_equal(u1.u, u2.u)
    nu = u1.diagnostics["admissibility"]["nu"]
    assert max(u1.diagnostics["contraction_ratios"]) <= nu


def test_warm_start_reaches_same_fixed_point():
    prob = _problem(Disk(), 21, 0.3, 0.15, 0.15, AngularGrid.circle(12))
    f = SmoothSource.constant(1.0)
    cold = solve_nonlinear(prob, f, tol=1e-12)
    warm = solve_nonlinear(prob, f, tol=1e-12, m_start=cold.mean * 0.9)
    np.testing.assert_allclose(warm.mean, cold.mean, atol=1e-11)
    assert warm.diagnostics["outer_iterations"] <= cold.diagnostics["outer_iterations"]


def test_collimated_beam_exit_matches_closed_form():
    a, b = 0.4, 0.3
    prob = _problem(Disk(), 25, a, b, 0.0, AngularGrid.circle(8))
    u = solve_nonlinear(prob, CollimatedSource(1.25, (1.0, 0.0)))
    exits = np.array([[1.0, 0.0], [0.6, 0.8], [0.8, -0.6]])
    got = u.column_exit(exits)[:, 0]
    L = 2.0 * exits[:, 0]
    exact = np.exp(-a * L) / (0.8 + b * (1.0 - np.exp(-a * L)) / a)
    # the mean field is interpolated between nodes: O(h^2) on this coarse grid
    np.testing.assert_allclose(got, exact, rtol=1e-3)


def test_expansion_terms_reject_localized_beams():
    prob = _problem(Disk(), 13, 0.1, 0.1, 0.1, AngularGrid.circle(8))
    beam = MollifiedBeam(0.0, 1.0, 0.2, (1.0, 0.0), 0.2, (-1.0, 0.0))
    with pytest.raises(ValidationError):
        expansion_terms(prob, SmoothSource.constant(1.0), beam)


def test_expansion_first_order_term_matches_difference_quotient():
    prob = _problem(Disk(), 17, 0.3, 0.2, 0.1, AngularGrid.circle(12))
    f0, f1 = SmoothSource.constant(1.0), SmoothSource.constant(0.5)
    u0, u1 = expansion_terms(prob, f0, f1)
    d = 1e-5
    up = solve_nonlinear(prob, SmoothSource.constant(1.0 + 0.5 * d), tol=1e-14, inner_tol=1e-14)
    um = solve_nonlinear(prob, SmoothSource.constant(1.0 - 0.5 * d), tol=1e-14, inner_tol=1e-14)
    np.testing.assert_allclose(u1.mean, (up.mean - um.mean) / (2 * d), rtol=1e-6, atol=1e-8)
    assert math.isclose(float(np.max(u0.mean)), float(np.max(solve_nonlinear(prob, f0).mean)), rel_tol=1e-9)


_SA = Phantom(({"type": "gaussian", "center": (0.1, -0.2), "amplitude": 0.4, "width": 0.3},))
_SB = Phantom(({"type": "gaussian", "center": (-0.2, 0.25), "amplitude": 0.3, "width": 0.25},))


@pytest.fixture(scope="module")
def refinement():
    d = Disk()
    ang = AngularGrid.circle(16)
    sampling = boundary_sets(d, ang, 32)
    traces = []
    for n in (12, 24, 48):
        g = Grid.over(d, n)
        prob = TransportProblem(d, _SA.sample(g), _SB.sample(g), PhaseFunction.isotropic(ScalarField.constant(g, 0.1)),
                                angles=ang)
        traces.append(albedo(prob, SmoothSource.constant(1.0), sampling=sampling).values)
    return [float(np.max(np.abs(traces[i] - traces[i + 1]))) for i in range(2)]


def test_albedo_grid_refinement_is_second_order(refinement):
    coarse, fine = refinement
    assert 1.8 <= math.log2(coarse / fine) <= 2.3


@pytest.mark.xfail(strict=True, reason="ratio approaches 4 from above (4.34 at N = 12, 24, 48)")
def test_albedo_refinement_ratio_at_most_four(refinement):
    coarse, fine = refinement
    assert coarse <= 4.0 * fine
