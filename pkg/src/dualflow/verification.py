"""Oracles and experiment drivers for the dual solvers, at desk scale.

Exact solutions are single-Fourier-mode flows, so their spatial derivatives
are reproduced exactly by the spectral operators and the only discretization
error in play is the second-order time stencil.  The steady shear is a
time-independent ideal flow (time error vanishes too); the decaying vortex
exercises the viscous coupling.  Every named solution self-tests its strong
residual on the grid before any experiment uses it.

Random fields are built from seeded low-mode Fourier sums, so the same seed
defines the same continuum field on every resolution; refinement studies
rely on that.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .euler import (
    ProblemData,
    compute_derived,
    euler_gradient,
    feasibility_floor,
    recover_velocity,
)
from .fields import (
    DualState,
    PrimalState,
    ScalarField,
    SymMatrixField,
    VectorField,
    eig_range_sym,
    inner,
    min_margin_values,
    norm,
    spd_solve,
    sym_eigenvalues,
)
from .grid import SYM_PAIRS, SYM_WEIGHTS, Grid
from .maximize import (
    DualObjective,
    MaxOptions,
    MaxResult,
    euler_dual_objective,
    maximize,
    ns_dual_objective,
)
from .navier_stokes import ns_gradient, nsp_gradient, recover_vw

__all__ = [
    "ExactSolution",
    "exact_solution",
    "ConsistencyReport",
    "fd_gradient_check",
    "consistency_experiment",
    "sup_representation_check",
    "apriori_bound_audit",
    "weak_residual_report",
    "random_scalar_field",
    "random_vector_field",
    "random_sym_field",
    "random_dual",
    "random_problem",
]

SOLUTION_NAMES = ("steady_shear_2d", "taylor_green_2d", "gradient_flow_check")


@dataclass
class ExactSolution:
    """Closed-form flow used as base state in consistency experiments.

    ``decay`` is the exponential rate of the velocity amplitude; the strong
    system solved is the first-order form whose stress closure is
    W = nu * sym_grad(V), so the effective Laplacian coefficient is nu/2.
    """

    name: str
    nu: float
    amplitude: float = 1.0

    def __post_init__(self):
        if self.name not in SOLUTION_NAMES:
            raise ValueError(f"unknown exact solution {self.name!r}")
        if self.name == "steady_shear_2d" and self.nu != 0.0:
            raise ValueError("steady_shear_2d is inviscid (nu = 0)")

    @property
    def decay(self) -> float:
        if self.name == "steady_shear_2d":
            return 0.0
        if self.name == "taylor_green_2d":
            return 4.0 * np.pi**2 * self.nu
        return 2.0 * np.pi**2 * self.nu

    def _profile(self, grid: Grid) -> np.ndarray:
        t = grid.times()
        return self.amplitude * np.exp(-self.decay * t)

    def _shape(self, grid: Grid) -> np.ndarray:
        """Unit-amplitude spatial velocity pattern, (d, *spatial)."""
        x = grid.coords()
        if self.name == "taylor_green_2d":
            u = np.cos(2 * np.pi * x[0]) * np.sin(2 * np.pi * x[1])
            v = -np.sin(2 * np.pi * x[0]) * np.cos(2 * np.pi * x[1])
            comps = [u, v] + [np.zeros_like(u)] * (grid.d - 2)
        else:
            u = np.sin(2 * np.pi * x[1])
            comps = [u] + [np.zeros_like(u)] * (grid.d - 1)
        return np.stack(comps)

    def velocity(self, grid: Grid) -> VectorField:
        prof = self._profile(grid).reshape((grid.n_t, 1) + (1,) * grid.d)
        return VectorField(grid, prof * self._shape(grid)[None])

    def velocity_rate(self, grid: Grid) -> np.ndarray:
        """Analytic time derivative of the velocity on the grid."""
        return -self.decay * self.velocity(grid).values

    def pressure(self, grid: Grid) -> ScalarField:
        if self.name != "taylor_green_2d":
            return ScalarField.zeros(grid)
        x = grid.coords()
        shape = -0.25 * (np.cos(4 * np.pi * x[0]) + np.cos(4 * np.pi * x[1]))
        prof = (self._profile(grid) ** 2).reshape((grid.n_t,) + (1,) * grid.d)
        return ScalarField(grid, prof * shape[None])

    def stress(self, grid: Grid) -> SymMatrixField:
        v = self.velocity(grid)
        return SymMatrixField(grid, self.nu * grid.sym_grad(v.values))

    def v0(self, grid: Grid) -> np.ndarray:
        return self.amplitude * self._shape(grid)

    def problem(self, grid: Grid, a_v: float = 1.0, a_w: float = 1.0, a_p: float = 1.0) -> ProblemData:
        return ProblemData.make(
            grid,
            a_v=a_v,
            a_w=a_w,
            a_p=a_p,
            nu=self.nu,
            vbar=self.velocity(grid),
            wbar=self.stress(grid),
            pbar=self.pressure(grid),
            v0=self.v0(grid),
        )

    def strong_residual(self, grid: Grid) -> float:
        """Max pointwise residual of the first-order momentum/continuity system."""
        v = self.velocity(grid).values
        p = self.pressure(grid).values
        flux = grid.div_sym(_outer_sym(grid, v, v))
        visc = grid.div_sym(self.nu * grid.sym_grad(v))
        momentum = self.velocity_rate(grid) + flux + grid.grad(p) - visc
        cont = grid.div(v)
        return float(max(np.abs(momentum).max(), np.abs(cont).max()))


def _outer_sym(grid: Grid, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    from .fields import sym_outer

    return sym_outer(grid, u, v)


def exact_solution(name: str, nu: float = 0.0, amplitude: float = 1.0) -> ExactSolution:
    sol = ExactSolution(name=name, nu=nu, amplitude=amplitude)
    return sol


# ----------------------------------------------------------------------
# seeded smooth random fields (resolution-independent continuum objects)


def _mode_coeffs(rng: np.random.Generator, d: int, k_max: int, n_modes: int):
    """Random (wavevector, cos amp, sin amp) triples, excluding the mean mode."""
    coeffs = []
    while len(coeffs) < n_modes:
        k = rng.integers(-k_max, k_max + 1, size=d)
        if not np.any(k):
            continue
        coeffs.append((k, rng.normal(), rng.normal()))
    return coeffs


def _eval_modes(coeffs, grid: Grid) -> np.ndarray:
    x = grid.coords()
    out = np.zeros(grid.spatial_shape)
    for k, a, b in coeffs:
        phase = 2 * np.pi * sum(k[i] * x[i] for i in range(grid.d))
        out += a * np.cos(phase) + b * np.sin(phase)
    return out


def _time_poly(rng: np.random.Generator, grid: Grid, degree: int, terminal_zero: bool) -> np.ndarray:
    c = rng.normal(size=degree + 1)
    t = grid.times()
    p = np.polyval(c, t)
    if terminal_zero:
        p = p * (grid.t_final - t)
    return p


def _bct(p: np.ndarray, grid: Grid) -> np.ndarray:
    """Reshape a per-slice profile for broadcasting over spatial axes."""
    return p.reshape((grid.n_t,) + (1,) * grid.d)


def random_scalar_field(
    grid: Grid,
    rng: np.random.Generator,
    k_max: int = 2,
    n_modes: int = 4,
    n_terms: int = 2,
    degree: int = 3,
    terminal_zero: bool = False,
) -> ScalarField:
    """Band-limited random scalar with smooth polynomial time dependence."""
    vals = np.zeros(grid.scalar_shape)
    for _ in range(n_terms):
        shape = _eval_modes(_mode_coeffs(rng, grid.d, k_max, n_modes), grid)
        vals += _bct(_time_poly(rng, grid, degree, terminal_zero), grid) * shape[None]
    return ScalarField(grid, vals)


def random_vector_field(
    grid: Grid,
    rng: np.random.Generator,
    k_max: int = 2,
    n_modes: int = 4,
    n_terms: int = 2,
    degree: int = 3,
    terminal_zero: bool = False,
    solenoidal: bool = False,
) -> VectorField:
    """Random vector field; with ``solenoidal`` each slice is Leray-projected.

    The projection of a band-limited field is again band-limited, so the same
    seed keeps defining one continuum field across resolutions.
    """
    comps = []
    for _ in range(grid.d):
        comps.append(
            random_scalar_field(grid, rng, k_max, n_modes, n_terms, degree, terminal_zero).values
        )
    vals = np.stack(comps, axis=1)
    if solenoidal:
        vals = grid.leray(vals)
    return VectorField(grid, vals)


def random_sym_field(
    grid: Grid,
    rng: np.random.Generator,
    k_max: int = 2,
    n_modes: int = 4,
    n_terms: int = 2,
    degree: int = 3,
) -> SymMatrixField:
    comps = []
    for _ in range(grid.n_sym):
        comps.append(random_scalar_field(grid, rng, k_max, n_modes, n_terms, degree).values)
    return SymMatrixField(grid, np.stack(comps, axis=1))


def random_dual(
    grid: Grid,
    variant: str,
    rng: np.random.Generator,
    a_v: float = 1.0,
    target_norm: float | None = None,
    margin_frac: float = 0.5,
    k_max: int = 2,
) -> DualState:
    """Random feasible dual state of the given variant.

    The state is scaled so the smallest eigenvalue of a_v*Id + 2B stays at
    least ``margin_frac * a_v``; if ``target_norm`` is given, the state is
    rescaled toward it but never beyond the margin constraint.
    """
    lam = random_vector_field(
        grid, rng, k_max=k_max, terminal_zero=True, solenoidal=(variant != "ns_pressure")
    )
    gamma = random_scalar_field(grid, rng, k_max=k_max)
    chi = None if variant == "euler" else random_sym_field(grid, rng, k_max=k_max)
    dual = DualState(lam, gamma, chi, variant).project()

    target_margin = margin_frac * a_v
    strain = grid.sym_grad(dual.lam.values)
    m1 = float(min_margin_values(a_v, strain, grid.d).min())
    # min-eig is concave in the state scale: this rescaling guarantees the margin
    if m1 < target_margin:
        c = (a_v - target_margin) / (a_v - m1)
        dual = dual.scale(c)
    if target_norm is not None:
        n0 = dual.norm()
        if n0 > 0:
            c = target_norm / n0
            dual = dual.scale(c)
            strain = grid.sym_grad(dual.lam.values)
            m = float(min_margin_values(a_v, strain, grid.d).min())
            if m < target_margin:
                dual = dual.scale((a_v - target_margin) / (a_v - m))
    return dual


def random_problem(
    grid: Grid,
    variant: str,
    rng: np.random.Generator,
    with_forcing: bool = True,
) -> ProblemData:
    """Random problem data: arbitrary smooth base states, admissible v0."""
    a_v = float(rng.uniform(0.5, 3.0))
    a_w = float(rng.uniform(0.5, 3.0))
    a_p = float(rng.uniform(0.5, 3.0))
    nu = 0.0 if variant == "euler" else float(rng.uniform(0.0, 0.1))
    vbar = random_vector_field(grid, rng)
    wbar = random_sym_field(grid, rng)
    pbar = random_scalar_field(grid, rng)
    forcing = random_vector_field(grid, rng) if with_forcing else None
    v0_full = random_vector_field(grid, rng, terminal_zero=False, solenoidal=True)
    v0 = v0_full.values[0] - v0_full.values[0].reshape(grid.d, -1).mean(axis=1).reshape(
        (grid.d,) + (1,) * grid.d
    )
    return ProblemData.make(
        grid, a_v=a_v, a_w=a_w, a_p=a_p, nu=nu,
        vbar=vbar, wbar=wbar, pbar=pbar, forcing=forcing, v0=v0,
    )


# ----------------------------------------------------------------------
# checks


def fd_gradient_check(
    objective: DualObjective,
    point: DualState,
    n_directions: int = 10,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Central-difference directional derivatives against the analytic gradient.

    Directions are random dual states projected onto the variant's
    constraint subspace and normalized; returns the worst relative error.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    grad = objective.gradient(point)
    worst = 0.0
    for _ in range(n_directions):
        direction = random_dual(point.grid, point.variant, rng, a_v=objective.a_eff)
        direction = objective.project(direction)
        dnorm = direction.norm()
        if dnorm == 0.0:
            continue
        direction = direction.scale(1.0 / dnorm)
        jp = objective.value(point.add_scaled(direction, step))
        jm = objective.value(point.add_scaled(direction, -step))
        fd = (jp - jm) / (2.0 * step)
        an = grad.inner(direction)
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-10)
        worst = max(worst, err)
    return worst


@dataclass
class ConsistencyReport:
    problem: str
    variant: str
    j_opt: float
    dual_norm: float
    v_rel_err: float
    w_rel_err: float
    p_rel_err: float
    residual_momentum: float
    residual_continuity: float
    residual_constitutive: float
    residual_initial: float
    iterations: int
    wall_time_s: float
    termination: str


def consistency_experiment(
    solution: ExactSolution,
    variant: str,
    grid: Grid,
    opts: MaxOptions,
    perturb_norm: float = 0.1,
    seed: int = 0,
    vbar_scale: float = 1.0,
    a_v: float = 1.0,
    a_w: float = 1.0,
) -> tuple[ConsistencyReport, MaxResult]:
    """Solve the dual problem whose base state is an exact solution.

    With ``vbar_scale`` != 1 the base state is spoiled on purpose (negative
    control): the dual optimum must then move away from zero.
    """
    if variant == "euler" and solution.nu != 0.0:
        raise ValueError("euler variant requires an inviscid solution")
    prob = solution.problem(grid, a_v=a_v, a_w=a_w)
    if vbar_scale != 1.0:
        prob = ProblemData.make(
            grid, a_v=prob.a_v, a_w=prob.a_w, a_p=prob.a_p, nu=prob.nu,
            vbar=VectorField(grid, vbar_scale * prob.vbar.values),
            wbar=prob.wbar, pbar=prob.pbar, forcing=prob.forcing, v0=prob.v0,
        )
    rng = np.random.default_rng(seed)
    init = random_dual(grid, variant, rng, a_v=prob.a_v, target_norm=perturb_norm)

    objective = (
        euler_dual_objective(prob) if variant == "euler" else ns_dual_objective(prob)
    )
    t0 = time.perf_counter()
    result = maximize(objective, init, opts)
    wall = time.perf_counter() - t0

    if variant == "euler":
        primal = recover_velocity(result.state, prob)
    else:
        primal = recover_vw(result.state, prob)
    vbar_n = norm(prob.vbar)
    v_err = norm(VectorField(grid, primal.v.values - prob.vbar.values))
    v_rel = v_err / vbar_n if vbar_n > 0 else v_err
    w_rel = float("nan")
    if primal.w is not None:
        wbar_n = norm(prob.wbar)
        w_err = norm(SymMatrixField(grid, primal.w.values - prob.wbar.values))
        w_rel = w_err / wbar_n if wbar_n > 0 else w_err
    residuals = weak_residual_report(primal, prob)
    report = ConsistencyReport(
        problem=solution.name,
        variant=variant,
        j_opt=result.objective_history[-1],
        dual_norm=result.state.norm(),
        v_rel_err=v_rel,
        w_rel_err=w_rel,
        p_rel_err=float("nan"),
        residual_momentum=residuals["momentum"],
        residual_continuity=residuals["continuity"],
        residual_constitutive=residuals.get("constitutive", float("nan")),
        residual_initial=residuals["initial"],
        iterations=result.iterations,
        wall_time_s=wall,
        termination=result.termination,
    )
    return report, result


def weak_residual_report(primal: PrimalState, prob: ProblemData) -> dict:
    """Named weak-residual norms at the dual a primal state came from.

    Momentum, continuity and (viscous variants) constitutive norms are the
    gradient block norms; the initial norm is the spatial L2 mismatch between
    the recovered velocity at t = 0 and the initial datum.
    """
    dual = primal.dual
    if dual is None:
        raise ValueError("primal state does not reference its dual state")
    if dual.variant == "euler":
        grad = euler_gradient(dual, prob)
    elif dual.variant == "ns":
        grad = ns_gradient(dual, prob)
    else:
        grad = nsp_gradient(dual, prob)
    out = {
        "momentum": norm(grad.lam),
        "continuity": norm(grad.gamma),
        "initial": primal.diagnostics.get("initial_mismatch", float("nan")),
    }
    if grad.chi is not None:
        out["constitutive"] = norm(grad.chi)
    return out


def sup_representation_check(
    drive: VectorField,
    strain: SymMatrixField,
    a_v: float,
    n_samples: int = 10_000,
    rng: np.random.Generator | None = None,
) -> dict:
    """Sampled check of the linear sup-representation of the quadratic form.

    At random nodes and random (Z, M = Z x Z + PSD), the pairing
    2 E.Z - N:M must stay below E^T N^{-1} E, with equality at the
    optimizing pair Z = N^{-1} E, M = Z x Z.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    grid = drive.grid
    d = grid.d
    flat_e = drive.values.reshape(grid.n_t, d, -1)
    flat_b = strain.values.reshape(grid.n_t, grid.n_sym, -1)
    n_nodes = flat_e.shape[-1]
    max_violation = -np.inf
    max_equality_gap = 0.0
    for _ in range(n_samples):
        kt = int(rng.integers(grid.n_t))
        kx = int(rng.integers(n_nodes))
        e = flat_e[kt, :, kx]
        bsl = flat_b[kt, :, kx]
        n_mat = np.zeros((d, d))
        for s, (i, j) in enumerate(SYM_PAIRS[d]):
            n_mat[i, j] = n_mat[j, i] = 2.0 * bsl[s]
        n_mat += a_v * np.eye(d)
        quad = float(e @ spd_solve(n_mat, e))
        z = rng.normal(size=d)
        a = rng.normal(size=(d, d))
        m = np.outer(z, z) + a @ a.T
        val = 2.0 * float(e @ z) - float((n_mat * m).sum())
        max_violation = max(max_violation, val - quad)
        z_star = spd_solve(n_mat, e)
        m_star = np.outer(z_star, z_star)
        eq = 2.0 * float(e @ z_star) - float((n_mat * m_star).sum())
        max_equality_gap = max(max_equality_gap, abs(eq - quad))
    return {"max_violation": float(max_violation), "max_equality_gap": float(max_equality_gap)}


def apriori_bound_audit(
    result: MaxResult,
    prob: ProblemData,
    rel_slack: float | None = None,
) -> list[dict]:
    """Audit the bounds a feasible (and, where required, optimal) dual obeys.

    Rows: name, value, bound, passed, note.  Feasibility facts (eigenvalue
    window, Frobenius bound) are always checked; the quadratic-drive bound
    holds only for near-maximizers and is skipped with a reason otherwise.
    The time-integral bound on lam allows a small relative slack for the
    second-order quadrature.
    """
    dual = result.state
    grid = dual.grid
    d, a_v, tf = grid.d, prob.a_v, grid.t_final
    if rel_slack is None:
        rel_slack = max(0.05, 20.0 * grid.dt**2)
    rows = []

    derived = compute_derived(dual, prob)
    strain = derived.strain.values
    lo, hi = eig_range_sym(strain, d)
    rows.append(
        {
            "check": "strain_eig_lower",
            "value": float(lo.min()),
            "bound": -a_v / 2.0 - 1e-10,
            "passed": bool(lo.min() >= -a_v / 2.0 - 1e-10),
            "note": "",
        }
    )
    rows.append(
        {
            "check": "strain_eig_upper",
            "value": float(hi.max()),
            "bound": (d - 1) * a_v / 2.0 + 1e-10,
            "passed": bool(hi.max() <= (d - 1) * a_v / 2.0 + 1e-10),
            "note": "",
        }
    )
    frob = np.sqrt(sum(w * strain[:, s] ** 2 for s, w in enumerate(SYM_WEIGHTS[d])))
    fb = np.sqrt(d) * (d - 1) / 2.0 * a_v + 1e-10
    rows.append(
        {
            "check": "strain_frobenius",
            "value": float(frob.max()),
            "bound": fb,
            "passed": bool(frob.max() <= fb),
            "note": "",
        }
    )

    if dual.variant in ("euler", "ns"):
        lam_n = norm(dual.lam)
        e_n = norm(derived.drive)
        bound = (tf / np.sqrt(2.0)) * e_n * (1.0 + rel_slack) + 1e-12
        rows.append(
            {
                "check": "lam_from_drive",
                "value": lam_n,
                "bound": bound,
                "passed": bool(lam_n <= bound),
                "note": f"rel_slack={rel_slack:.3g}",
            }
        )
    else:
        rows.append(
            {
                "check": "lam_from_drive",
                "value": float("nan"),
                "bound": float("nan"),
                "passed": True,
                "note": "skipped: lam not solenoidal in this variant",
            }
        )

    if result.termination == "converged":
        eps = result.grad_tol
        e_shift = norm(
            VectorField(grid, derived.drive.values - a_v * prob.vbar.values)
        )
        v0_sq = grid.integrate_space(np.einsum("c...,c...->...", prob.v0, prob.v0))
        vbar_n = norm(prob.vbar)
        f_sq_field = np.einsum("tc...,tc...->t...", prob.forcing.values, prob.forcing.values)
        f_sq_norm_sq = grid.integrate(f_sq_field**2)
        c_t = (2.0 / 3.0) * tf**1.5
        rhs = (
            8.0 * d * a_v * (eps + (d + 0.5) * a_v * v0_sq)
            + (a_v**2 + 8.0 * d * a_v**2) * vbar_n
            + 16.0 * c_t * d**2 * a_v**2 * f_sq_norm_sq
        )
        rows.append(
            {
                "check": "drive_shift_sq",
                "value": e_shift**2,
                "bound": rhs,
                "passed": bool(e_shift**2 <= rhs),
                "note": f"eps={eps:.3g}",
            }
        )
    else:
        rows.append(
            {
                "check": "drive_shift_sq",
                "value": float("nan"),
                "bound": float("nan"),
                "passed": True,
                "note": "skipped: eps-maximizer hypothesis unmet",
            }
        )
    return rows
