"""Forward solver and reconstruction toolkit for two-photon-absorption transport."""

from .geometry import (AngularGrid, Ball, Disk, Domain, DomainError, Grid, Rect, boundary_sets, chord_quadrature,
                       exit_time)
from .coefficients import (
    BoundarySource,
    BumpProfile,
    CollimatedSource,
    MollifiedBeam,
    PhaseFunction,
    Phantom,
    ScalarField,
    SmoothSource,
    ValidationError,
    check_admissibility,
    make_phantom,
    omega_constant,
    star_norm,
)
from .transport import (
    AdmissibilityError,
    ConvergenceError,
    RadianceField,
    TransportProblem,
    albedo,
    apply_H,
    apply_J,
    expansion_terms,
    solve_linear,
    solve_nonlinear,
    solve_riccati_ray,
)

from .transforms import LineSet, Sinogram, attenuated_xray, cgls, invert_ls, transform_matrix, xray
from .reconstruction import (
    AlbedoOracle,
    GeometricSequence,
    LimitSchedule,
    recover_effective_attenuation,
    recover_k_point,
    recover_mu_line,
    recover_sigma_a_scatterfree,
    recover_sigma_b_scatterfree,
    recover_sigma_b_scattering,
    recover_xray_sigma_a_scattering,
)
from .metrics import rel_l2

__version__ = "0.1.0"

__all__ = [n for n in dir() if not n.startswith("_")]
