"""Navier-Stokes dual objectives: viscous variant and pressure variant.

The viscous variant adds a symmetric-matrix dual field ``chi`` and works with
the extended drive EE = dt(lam) + grad(gamma) + nu * div(chi).  The stress
unknown is eliminated exactly (the inner minimization in it is pointwise
quadratic), leaving

    J = int [ -1/2 (EE - a_v Vbar)^T N^{-1} (EE - a_v Vbar)
              - 1/(2 a_w) |chi - B - a_w Wbar|^2
              - V0 . EE - nu grad(V0) : chi
              + a_v/2 |Vbar|^2 + a_w/2 |Wbar|^2 + F . lam ] dt dx.

The sign of the nu grad(V0) : chi term follows from integration by parts of
int lam(0) . V0 against the definition of EE (chi symmetric, div lam = 0,
lam(T) = 0).

The pressure variant frees lam from the divergence constraint and treats the
pressure via r = div(lam); its objective is assembled from the combinations
P = dt(lam) + grad(gamma) + nu div(chi) + 2 Vbar . B, Q = B - chi and r, with
the feasibility matrix Id + (2/a_v) B.

``compatibility_residual`` measures how well derived (EE, B, chi) triples
satisfy the linear constraint that characterizes fields arising from an
actual (lam, gamma, chi); its time derivative uses the independent
fourth-order stencil so the production scheme's second-order defect is what
gets measured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .euler import (
    DerivedDual,
    Infeasible,
    ProblemData,
    compute_derived,
    feasibility_floor,
    require_feasible,
)
from .fields import (
    DualState,
    PrimalState,
    ScalarField,
    SymMatrixField,
    VectorField,
    apply_inverse_shifted,
    norm,
    sym_frob_dot,
    sym_outer,
    sym_vec_contract,
    vec_dot,
)

__all__ = [
    "ns_objective",
    "ns_gradient",
    "recover_vw",
    "PressureDerived",
    "compute_pressure_derived",
    "nsp_objective",
    "nsp_gradient",
    "nsp_recover",
    "compatibility_residual",
]


def _require_variant(dual: DualState, variant: str):
    if dual.variant != variant:
        raise ValueError(f"expected variant {variant!r}, got {dual.variant!r}")


def _ns_core(dual: DualState, prob: ProblemData, floor, want_grad: bool):
    _require_variant(dual, "ns")
    grid = dual.grid
    derived = compute_derived(dual, prob, floor=floor)
    require_feasible(derived)
    a_v, a_w, nu = prob.a_v, prob.a_w, prob.nu

    e = derived.drive.values - a_v * prob.vbar.values
    y = apply_inverse_shifted(a_v, derived.strain.values, e, grid.d)
    mismatch = dual.chi.values - derived.strain.values - a_w * prob.wbar.values
    grad_v0 = grid.sym_grad(prob.v0[None])  # (1, m, *s), broadcasts in time

    integrand = (
        -0.5 * vec_dot(e, y)
        - (0.5 / a_w) * sym_frob_dot(grid, mismatch, mismatch)
        - vec_dot(np.broadcast_to(prob.v0_bc(), e.shape), derived.drive.values)
        - nu * sym_frob_dot(grid, np.broadcast_to(grad_v0, dual.chi.values.shape), dual.chi.values)
        + 0.5 * a_v * vec_dot(prob.vbar.values, prob.vbar.values)
        + 0.5 * a_w * sym_frob_dot(grid, prob.wbar.values, prob.wbar.values)
        + vec_dot(prob.forcing.values, dual.lam.values)
    )
    value = grid.integrate(integrand)
    if not want_grad:
        return value, None

    dq_drive = -y - prob.v0_bc()
    g_strain = sym_outer(grid, y, y) + mismatch / a_w
    g_lam = (
        grid.time_derivative_adjoint(dq_drive, terminal_zero=True)
        - grid.div_sym(g_strain)
        + prob.forcing.values
    )
    g_gamma = -grid.div(dq_drive)
    g_chi = -nu * grid.sym_grad(dq_drive) - mismatch / a_w - nu * grad_v0
    grad = DualState(
        VectorField(grid, g_lam),
        ScalarField(grid, g_gamma),
        SymMatrixField(grid, np.broadcast_to(g_chi, dual.chi.values.shape).copy()),
        "ns",
    ).project()
    return value, grad


def ns_objective(dual: DualState, prob: ProblemData, floor: float | None = None) -> float:
    """Viscous dual objective; zero dual gives exactly zero for any data."""
    value, _ = _ns_core(dual, prob, floor, want_grad=False)
    return value


def ns_gradient(dual: DualState, prob: ProblemData, floor: float | None = None) -> DualState:
    """Gradient blocks are the weak residuals: momentum (lam), continuity
    (gamma) and the constitutive relation between stress and strain (chi)."""
    _, grad = _ns_core(dual, prob, floor, want_grad=True)
    return grad


def recover_vw(dual: DualState, prob: ProblemData, floor: float | None = None) -> PrimalState:
    """Primal recovery V = N^{-1}(a_v Vbar - EE), W = Wbar + (B - chi)/a_w."""
    _require_variant(dual, "ns")
    grid = dual.grid
    derived = compute_derived(dual, prob, floor=floor)
    require_feasible(derived)
    rhs = prob.a_v * prob.vbar.values - derived.drive.values
    v_vals = apply_inverse_shifted(prob.a_v, derived.strain.values, rhs, grid.d)
    w_vals = prob.wbar.values + (derived.strain.values - dual.chi.values) / prob.a_w
    constitutive_gap = w_vals - prob.nu * grid.sym_grad(v_vals)
    init_gap = v_vals[0] - prob.v0
    diagnostics = {
        "max_abs_div_v": float(np.abs(grid.div(v_vals)).max()),
        "constitutive_gap": float(
            np.sqrt(grid.integrate(sym_frob_dot(grid, constitutive_gap, constitutive_gap)))
        ),
        "initial_mismatch": float(
            np.sqrt(grid.integrate_space(np.einsum("c...,c...->...", init_gap, init_gap)))
        ),
    }
    return PrimalState(
        v=VectorField(grid, v_vals),
        w=SymMatrixField(grid, w_vals),
        diagnostics=diagnostics,
        dual=dual,
    )


def ns_hessvec_factory(prob: ProblemData, floor: float | None = None):
    """Exact negative-second-derivative products of the viscous objective."""
    from .fields import sym_vec_contract

    cache: dict = {"state": None}

    def hessvec(dual: DualState, direction: DualState) -> DualState:
        grid = dual.grid
        a_v, a_w, nu = prob.a_v, prob.a_w, prob.nu
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
        if nu != 0.0:
            d_drive = d_drive + nu * grid.div_sym(direction.chi.values)
        d_strain = grid.sym_grad(direction.lam.values)
        d_mismatch = direction.chi.values - d_strain
        dy = apply_inverse_shifted(
            a_v, strain, d_drive - 2.0 * sym_vec_contract(grid, d_strain, y), grid.d
        )
        dq_drive = -dy
        dq_strain = 2.0 * sym_outer(grid, dy, y) + d_mismatch / a_w
        dq_chi = -d_mismatch / a_w
        h_lam = grid.time_derivative_adjoint(dq_drive, terminal_zero=True) - grid.div_sym(
            dq_strain
        )
        h_gamma = -grid.div(dq_drive)
        h_chi = -nu * grid.sym_grad(dq_drive) + dq_chi
        return DualState(
            VectorField(grid, -h_lam),
            ScalarField(grid, -h_gamma),
            SymMatrixField(grid, -h_chi),
            "ns",
        ).project()

    return hessvec


def nsp_hessvec_factory(prob: ProblemData, floor: float | None = None):
    """Exact negative-second-derivative products of the pressure-variant objective."""
    from .fields import sym_vec_contract

    cache: dict = {"state": None}

    def hessvec(dual: DualState, direction: DualState) -> DualState:
        grid = dual.grid
        a_v, a_w, a_p, nu = prob.a_v, prob.a_w, prob.a_p, prob.nu
        if cache["state"] is not dual:
            der = compute_pressure_derived(dual, prob, floor)
            if not der.feasible:
                m = der.margin
                loc = np.unravel_index(int(np.argmin(m)), m.shape)
                raise Infeasible(float(m.min()), loc)
            u = apply_inverse_shifted(1.0, der.strain.values / a_v, der.pdrive.values, grid.d)
            cache.update(state=dual, strain=der.strain.values, u=u)
        strain, u = cache["strain"], cache["u"]

        d_strain = grid.sym_grad(direction.lam.values)
        vbar_bc = np.broadcast_to(prob.vbar.values, direction.lam.values.shape)
        d_p = (
            grid.time_derivative(direction.lam.values, terminal_zero=True)
            + grid.grad(direction.gamma.values)
            + 2.0 * sym_vec_contract(grid, d_strain, vbar_bc)
        )
        if nu != 0.0:
            d_p = d_p + nu * grid.div_sym(direction.chi.values)
        d_q = d_strain - direction.chi.values
        d_r = grid.div(direction.lam.values)
        du = apply_inverse_shifted(
            1.0,
            strain / a_v,
            d_p - (2.0 / a_v) * sym_vec_contract(grid, d_strain, u),
            grid.d,
        )
        dq_p = -du / a_v
        dq_q = -d_q / a_w
        dq_r = -d_r / a_p
        dq_strain = (
            2.0 * sym_outer(grid, du, u) / a_v**2
            + 2.0 * sym_outer(grid, dq_p, vbar_bc)
            + dq_q
        )
        h_lam = (
            grid.time_derivative_adjoint(dq_p, terminal_zero=True)
            - grid.div_sym(dq_strain)
            - grid.grad(dq_r)
        )
        h_gamma = -grid.div(dq_p)
        h_chi = -nu * grid.sym_grad(dq_p) - dq_q
        return DualState(
            VectorField(grid, -h_lam),
            ScalarField(grid, -h_gamma),
            SymMatrixField(grid, -h_chi),
            "ns_pressure",
        ).project()

    return hessvec


# ----------------------------------------------------------------------
# pressure variant


@dataclass
class PressureDerived:
    """Combinations the pressure-variant objective is built from."""

    pdrive: VectorField  # dt(lam) + grad(gamma) + nu div(chi) + 2 Vbar . B
    qdiff: SymMatrixField  # B - chi
    lam_div: ScalarField  # div(lam), carries the pressure deviation
    strain: SymMatrixField
    margin: np.ndarray
    floor: float

    @property
    def feasible(self) -> bool:
        return bool(self.margin.min() >= self.floor)


def compute_pressure_derived(
    dual: DualState, prob: ProblemData, floor: float | None = None
) -> PressureDerived:
    _require_variant(dual, "ns_pressure")
    grid = dual.grid
    derived = compute_derived(dual, prob, floor=floor)
    pdrive_vals = derived.drive.values + 2.0 * sym_vec_contract(
        grid, derived.strain.values, np.broadcast_to(prob.vbar.values, derived.drive.values.shape)
    )
    return PressureDerived(
        pdrive=VectorField(grid, pdrive_vals),
        qdiff=SymMatrixField(grid, derived.strain.values - dual.chi.values),
        lam_div=ScalarField(grid, grid.div(dual.lam.values)),
        strain=derived.strain,
        margin=derived.margin,
        floor=derived.floor,
    )


def _nsp_core(dual: DualState, prob: ProblemData, floor, want_grad: bool):
    grid = dual.grid
    der = compute_pressure_derived(dual, prob, floor)
    if not der.feasible:
        m = der.margin
        loc = np.unravel_index(int(np.argmin(m)), m.shape)
        raise Infeasible(float(m.min()), loc)
    a_v, a_w, a_p, nu = prob.a_v, prob.a_w, prob.a_p, prob.nu

    p_vals = der.pdrive.values
    # nn = Id + (2/a_v) B, so nn^{-1} applications reuse the shifted solver
    u = apply_inverse_shifted(1.0, der.strain.values / a_v, p_vals, grid.d)
    q_vals = der.qdiff.values
    r_vals = der.lam_div.values
    vbar_outer = sym_outer(grid, prob.vbar.values, prob.vbar.values)

    integrand = (
        -0.5
        * (
            (1.0 / a_v) * vec_dot(p_vals, u)
            + (1.0 / a_w) * sym_frob_dot(grid, q_vals, q_vals)
            + (1.0 / a_p) * r_vals**2
        )
        + vec_dot(prob.vbar.values, p_vals)
        - sym_frob_dot(grid, vbar_outer, der.strain.values)
        - sym_frob_dot(grid, prob.wbar.values, q_vals)
        + prob.pbar.values * r_vals
        - vec_dot(prob.forcing.values, dual.lam.values)
    )
    value = grid.integrate(integrand) + grid.integrate_space(
        np.einsum("c...,c...->...", dual.lam.values[0], prob.v0)
    )
    if not want_grad:
        return value, None

    dq_p = -(1.0 / a_v) * u + prob.vbar.values  # cotangent of pdrive
    dq_q = -(1.0 / a_w) * q_vals - prob.wbar.values  # cotangent of qdiff
    dq_r = -(1.0 / a_p) * r_vals + prob.pbar.values  # cotangent of div(lam)

    g_strain = (
        sym_outer(grid, u, u) / a_v**2
        + 2.0 * sym_outer(grid, dq_p, np.broadcast_to(prob.vbar.values, dq_p.shape))
        - vbar_outer
        + dq_q
    )
    g_lam = (
        grid.time_derivative_adjoint(dq_p, terminal_zero=True)
        - grid.div_sym(g_strain)
        - grid.grad(dq_r)
        - prob.forcing.values
    )
    # Riesz representative of the initial-slice pairing int lam(0) . V0 dx
    g_lam[0] += prob.v0 / (grid.time_weights[0] * grid.dt)
    g_lam[-1] = 0.0
    g_gamma = -grid.div(dq_p)
    g_chi = -nu * grid.sym_grad(dq_p) - dq_q
    grad = DualState(
        VectorField(grid, g_lam),
        ScalarField(grid, g_gamma),
        SymMatrixField(grid, g_chi),
        "ns_pressure",
    ).project()
    return value, grad


def nsp_objective(dual: DualState, prob: ProblemData, floor: float | None = None) -> float:
    """Pressure-variant dual objective (lam not constrained to be solenoidal)."""
    value, _ = _nsp_core(dual, prob, floor, want_grad=False)
    return value


def nsp_gradient(dual: DualState, prob: ProblemData, floor: float | None = None) -> DualState:
    """Gradient of the pressure-variant objective; no Leray projection, the
    divergence part of lam carries the incompressibility residual weakly."""
    _, grad = _nsp_core(dual, prob, floor, want_grad=True)
    return grad


def nsp_recover(dual: DualState, prob: ProblemData, floor: float | None = None) -> PrimalState:
    """Primal recovery V = Vbar - nn^{-1} P / a_v, W = Wbar + Q/a_w, p = pbar - r/a_p."""
    grid = dual.grid
    der = compute_pressure_derived(dual, prob, floor)
    if not der.feasible:
        m = der.margin
        loc = np.unravel_index(int(np.argmin(m)), m.shape)
        raise Infeasible(float(m.min()), loc)
    u = apply_inverse_shifted(1.0, der.strain.values / prob.a_v, der.pdrive.values, grid.d)
    v_vals = prob.vbar.values - u / prob.a_v
    w_vals = prob.wbar.values + der.qdiff.values / prob.a_w
    p_vals = prob.pbar.values - der.lam_div.values / prob.a_p
    init_gap = v_vals[0] - prob.v0
    diagnostics = {
        "max_abs_div_v": float(np.abs(grid.div(v_vals)).max()),
        "initial_mismatch": float(
            np.sqrt(grid.integrate_space(np.einsum("c...,c...->...", init_gap, init_gap)))
        ),
    }
    return PrimalState(
        v=VectorField(grid, v_vals),
        w=SymMatrixField(grid, w_vals),
        p=ScalarField(grid, p_vals),
        diagnostics=diagnostics,
        dual=dual,
    )


# ----------------------------------------------------------------------
# compatibility constraint


def compatibility_residual(
    drive: VectorField,
    strain: SymMatrixField,
    chi: SymMatrixField | None,
    nu: float,
) -> float:
    """L2 norm of dt(B) - L(EE) - nu-correction on derived (EE, B, chi) fields.

    L(EE) = sym_grad(EE) - hessian(invlap(div EE)); the nu-correction is
    hessian(invlap(div div chi)) - sym_grad(div chi), scaled by nu.  Fields
    produced from an actual dual state satisfy this to the accuracy of the
    production time stencil; the residual differentiates B with the
    independent fourth-order stencil so that defect is what is measured.
    """
    grid = drive.grid
    dt_strain = grid.time_derivative_check(strain.values)
    div_drive = grid.div(drive.values)
    l_drive = grid.sym_grad(drive.values) - grid.hessian(grid.inv_laplacian(div_drive))
    resid = dt_strain - l_drive
    if chi is not None and nu != 0.0:
        div_chi = grid.div_sym(chi.values)
        ddchi = grid.div(div_chi)
        resid -= nu * (
            grid.hessian(grid.inv_laplacian(ddchi)) - grid.sym_grad(div_chi)
        )
    return norm(SymMatrixField(grid, resid))
