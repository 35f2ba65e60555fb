"""Euler dual objective, its gradient and the dual-to-primal velocity map.

The dual unknowns are a divergence-free vector field ``lam`` with lam(T) = 0
and a scalar field ``gamma``.  Writing E = dt(lam) + grad(gamma) and
B = sym_grad(lam), the objective after the (exact, pointwise) inner
minimization over the velocity is

    J = int [ -1/2 (E - a_v Vbar)^T N^{-1} (E - a_v Vbar)
              + a_v/2 |Vbar|^2 + F . lam - V0 . E ] dt dx,

with N = a_v Id + 2 B required positive definite (up to a floor) at every
node.  The completed-square form is used instead of the three separate
N^{-1} terms it expands into: algebraically identical, better conditioned,
and it makes J(0) = 0 exact.  The initial-data pairing uses -int V0 . E,
which for divergence-free lam vanishing at T matches int lam(0) . V0.

The gradient is the exact discrete adjoint of this objective with respect
to the trapezoid-weighted space-time inner product; its lam block is
Leray-projected (gradient within the divergence-free subspace), so the
blocks are discrete weak residuals: momentum for lam, continuity for gamma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import (
    DualState,
    PrimalState,
    ScalarField,
    SymMatrixField,
    VectorField,
    apply_inverse_shifted,
    inner,
    min_margin_values,
    norm,
    sym_outer,
    vec_dot,
)
from .grid import Grid

__all__ = [
    "Infeasible",
    "ProblemData",
    "DerivedDual",
    "feasibility_floor",
    "compute_derived",
    "euler_objective",
    "euler_gradient",
    "recover_velocity",
    "brenier_objective",
    "lambda0_initial_term",
]

FLOOR_FACTOR = 1e-8


class Infeasible(RuntimeError):
    """Positive-semidefiniteness floor violated somewhere on the grid."""

    def __init__(self, margin: float, location):
        self.margin = margin
        self.location = location
        super().__init__(f"feasibility margin {margin:.3e} below floor at node {location}")


@dataclass
class ProblemData:
    """Constants and given fields of one dual problem.

    ``v0`` must be divergence-free with zero spatial mean; the base states
    carry no constraint at all (``vbar`` in particular need not be
    divergence-free).
    """

    grid: Grid
    a_v: float
    a_w: float
    a_p: float
    nu: float
    vbar: VectorField
    wbar: SymMatrixField
    pbar: ScalarField
    forcing: VectorField
    v0: np.ndarray  # (d, *spatial)

    @classmethod
    def make(
        cls,
        grid: Grid,
        a_v: float = 1.0,
        a_w: float = 1.0,
        a_p: float = 1.0,
        nu: float = 0.0,
        vbar: VectorField | None = None,
        wbar: SymMatrixField | None = None,
        pbar: ScalarField | None = None,
        forcing: VectorField | None = None,
        v0: np.ndarray | None = None,
    ) -> "ProblemData":
        prob = cls(
            grid=grid,
            a_v=float(a_v),
            a_w=float(a_w),
            a_p=float(a_p),
            nu=float(nu),
            vbar=vbar if vbar is not None else VectorField.zeros(grid),
            wbar=wbar if wbar is not None else SymMatrixField.zeros(grid),
            pbar=pbar if pbar is not None else ScalarField.zeros(grid),
            forcing=forcing if forcing is not None else VectorField.zeros(grid),
            v0=v0 if v0 is not None else np.zeros((grid.d,) + grid.spatial_shape),
        )
        prob.validate()
        return prob

    def validate(self):
        if not (self.a_v > 0 and self.a_w > 0 and self.a_p > 0):
            raise ValueError("a_v, a_w, a_p must be positive")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        if self.v0.shape != (self.grid.d,) + self.grid.spatial_shape:
            raise ValueError(f"v0 shape {self.v0.shape} does not match the grid")
        div0 = self.grid.div(self.v0[None])
        if np.abs(div0).max() > 1e-10:
            raise ValueError(f"v0 not divergence-free: max |div| = {np.abs(div0).max():.3e}")
        mean0 = np.abs(self.v0.reshape(self.grid.d, -1).mean(axis=1)).max()
        if mean0 > 1e-10:
            raise ValueError(f"v0 not of zero spatial mean: max |mean| = {mean0:.3e}")

    def v0_bc(self) -> np.ndarray:
        """v0 broadcast against time-major vector arrays."""
        return self.v0[None]


def feasibility_floor(prob: ProblemData) -> float:
    return FLOOR_FACTOR * prob.a_v


@dataclass
class DerivedDual:
    """Fields derived from a dual state: drive E (or its viscous extension),
    strain B = sym_grad(lam), and the pointwise feasibility margin."""

    drive: VectorField
    strain: SymMatrixField
    margin: np.ndarray  # min eigenvalue of a*Id + 2*strain per node
    floor: float

    @property
    def feasible(self) -> bool:
        return bool(self.margin.min() >= self.floor)

    def min_margin(self) -> float:
        return float(self.margin.min())


def compute_derived(
    dual: DualState,
    prob: ProblemData,
    nu: float | None = None,
    a: float | None = None,
    floor: float | None = None,
) -> DerivedDual:
    """Assemble drive and strain fields and the eigenvalue margin.

    For chi-carrying variants the drive picks up nu * div(chi); ``a`` and
    ``nu`` can be overridden (the viscosity sweep shifts both).
    """
    grid = dual.grid
    if nu is None:
        nu = prob.nu
    if a is None:
        a = prob.a_v
    if floor is None:
        floor = feasibility_floor(prob)
    drive_vals = grid.time_derivative(dual.lam.values, terminal_zero=True) + grid.grad(
        dual.gamma.values
    )
    if dual.chi is not None and nu != 0.0:
        drive_vals = drive_vals + nu * grid.div_sym(dual.chi.values)
    strain_vals = grid.sym_grad(dual.lam.values)
    margin = min_margin_values(a, strain_vals, grid.d)
    return DerivedDual(
        drive=VectorField(grid, drive_vals),
        strain=SymMatrixField(grid, strain_vals),
        margin=margin,
        floor=floor,
    )


def require_feasible(derived: DerivedDual):
    if not derived.feasible:
        m = derived.margin
        loc = np.unravel_index(int(np.argmin(m)), m.shape)
        raise Infeasible(float(m.min()), loc)


def _euler_core(dual: DualState, prob: ProblemData, floor, want_grad: bool):
    grid = dual.grid
    derived = compute_derived(dual, prob, floor=floor)
    require_feasible(derived)
    a_v = prob.a_v
    e = derived.drive.values - a_v * prob.vbar.values
    y = apply_inverse_shifted(a_v, derived.strain.values, e, grid.d)

    integrand = (
        -0.5 * vec_dot(e, y)
        + 0.5 * a_v * vec_dot(prob.vbar.values, prob.vbar.values)
        + vec_dot(prob.forcing.values, dual.lam.values)
        - vec_dot(np.broadcast_to(prob.v0_bc(), e.shape), derived.drive.values)
    )
    value = grid.integrate(integrand)
    if not want_grad:
        return value, None

    dq_drive = -y - prob.v0_bc()  # cotangent of the drive field
    g_lam = (
        grid.time_derivative_adjoint(dq_drive, terminal_zero=True)
        - grid.div_sym(sym_outer(grid, y, y))
        + prob.forcing.values
    )
    g_gamma = -grid.div(dq_drive)
    grad = DualState(
        VectorField(grid, g_lam), ScalarField(grid, g_gamma), None, "euler"
    ).project()
    return value, grad


def euler_objective(dual: DualState, prob: ProblemData, floor: float | None = None) -> float:
    """Value of the Euler dual objective; raises Infeasible below the floor."""
    value, _ = _euler_core(dual, prob, floor, want_grad=False)
    return value


def euler_gradient(dual: DualState, prob: ProblemData, floor: float | None = None) -> DualState:
    """Discrete gradient of the Euler objective in (lam, gamma), lam block Leray-projected."""
    _, grad = _euler_core(dual, prob, floor, want_grad=True)
    return grad


def euler_hessvec_factory(prob: ProblemData, floor: float | None = None):
    """Exact product of -(second derivative of the Euler objective) with a
    direction.  The operator is positive semidefinite (the objective is
    concave); linearization data at the base state is cached so repeated
    products inside a Krylov solve cost about one gradient each."""
    cache: dict = {"state": None}

    def hessvec(dual: DualState, direction: DualState) -> DualState:
        grid = dual.grid
        a_v = prob.a_v
        if cache["state"] is not dual:
            derived = compute_derived(dual, prob, floor=floor)
            require_feasible(derived)
            e = derived.drive.values - a_v * prob.vbar.values
            y = apply_inverse_shifted(a_v, derived.strain.values, e, grid.d)
            cache.update(state=dual, strain=derived.strain.values, y=y)
        strain, y = cache["strain"], cache["y"]

        d_drive = grid.time_derivative(direction.lam.values, terminal_zero=True) + grid.grad(
            direction.gamma.values
        )
        d_strain = grid.sym_grad(direction.lam.values)
        from .fields import sym_vec_contract

        dy = apply_inverse_shifted(
            a_v, strain, d_drive - 2.0 * sym_vec_contract(grid, d_strain, y), grid.d
        )
        dq_drive = -dy
        dq_strain = 2.0 * sym_outer(grid, dy, y)
        h_lam = grid.time_derivative_adjoint(dq_drive, terminal_zero=True) - grid.div_sym(
            dq_strain
        )
        h_gamma = -grid.div(dq_drive)
        out = DualState(
            VectorField(grid, -h_lam), ScalarField(grid, -h_gamma), None, "euler"
        ).project()
        return out

    return hessvec


def recover_velocity(dual: DualState, prob: ProblemData, floor: float | None = None) -> PrimalState:
    """Closed-form primal velocity N^{-1}(a_v Vbar - E) with residual diagnostics."""
    grid = dual.grid
    derived = compute_derived(dual, prob, floor=floor)
    require_feasible(derived)
    rhs = prob.a_v * prob.vbar.values - derived.drive.values
    v_vals = apply_inverse_shifted(prob.a_v, derived.strain.values, rhs, grid.d)
    v = VectorField(grid, v_vals)
    grad = euler_gradient(dual, prob, floor)
    init_gap = v_vals[0] - prob.v0
    diagnostics = {
        "max_abs_div_v": float(np.abs(grid.div(v_vals)).max()),
        "momentum_residual": norm(grad.lam),
        "continuity_residual": norm(grad.gamma),
        "initial_mismatch": float(
            np.sqrt(grid.integrate_space(np.einsum("c...,c...->...", init_gap, init_gap)))
        ),
    }
    return PrimalState(v=v, diagnostics=diagnostics, dual=dual)


def brenier_objective(drive: VectorField, strain: SymMatrixField, v0: np.ndarray) -> float:
    """Quadratic-over-linear functional -1/2 int E (Id+2B)^{-1} E - int E . V0.

    The Euler objective with vbar = forcing = 0 and a_v = 1 reduces to this;
    raises NotPositiveDefinite where Id + 2B has a nonpositive pivot.
    """
    grid = drive.grid
    y = apply_inverse_shifted(1.0, strain.values, drive.values, grid.d)
    integrand = -0.5 * vec_dot(drive.values, y) - vec_dot(
        np.broadcast_to(v0[None], drive.values.shape), drive.values
    )
    return grid.integrate(integrand)


def lambda0_initial_term(dual: DualState, prob: ProblemData) -> float:
    """Initial-data pairing int lam(0) . V0 dx (alternative to -int V0 . E)."""
    grid = dual.grid
    return grid.integrate_space(
        np.einsum("c...,c...->...", dual.lam.values[0], prob.v0)
    )
