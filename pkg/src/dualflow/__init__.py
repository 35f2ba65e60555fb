"""Dual variational solvers for incompressible flow on the space-time torus.

The package assembles the concave dual objectives of the incompressible
Euler and Navier-Stokes systems (with or without an explicit pressure
field), maximizes them under the pointwise eigenvalue-floor constraint,
maps dual optima back to velocity/stress/pressure fields in closed form,
and runs the viscosity-sweep experiment that tracks the convergence of the
viscous minimizers to the inviscid ones.
"""

from .euler import (
    DerivedDual,
    Infeasible,
    ProblemData,
    brenier_objective,
    compute_derived,
    euler_gradient,
    euler_objective,
    feasibility_floor,
    lambda0_initial_term,
    recover_velocity,
)
from .fields import (
    DualState,
    NotPositiveDefinite,
    PrimalState,
    ScalarField,
    SymMatrixField,
    VectorField,
    divergence,
    inner,
    integrate_spacetime,
    inverse_laplacian,
    leray_project,
    norm,
    spatial_gradient,
    spd_solve,
    sym_divergence,
    sym_eigenvalues,
    sym_gradient,
    time_derivative,
)
from .grid import Grid, make_grid
from .maximize import (
    DualObjective,
    MaxOptions,
    MaxResult,
    euler_dual_objective,
    feasible_step_bound,
    maximize,
    ns_dual_objective,
    nsp_dual_objective,
)
from .navier_stokes import (
    compatibility_residual,
    compute_pressure_derived,
    ns_gradient,
    ns_objective,
    nsp_gradient,
    nsp_objective,
    nsp_recover,
    recover_vw,
)

__version__ = "0.1.0"
