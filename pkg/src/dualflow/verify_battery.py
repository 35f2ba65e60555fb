"""Compact verification battery behind the ``verify`` CLI command.

Each row is one named check with its measured value, the bound it must meet
and a pass flag.  The battery is a desk-scale subset of the full acceptance
suite (which lives with the tests): identities, gradient checks, the ideal
steady-shear experiment, the sampled sup-representation inequality,
refinement of the compatibility residual, and the feasibility corollaries.
The eigenvalue-floor sensitivity rows are informational (the behavior as
the floor shrinks is reported, not adjudicated).
"""

from __future__ import annotations

import numpy as np

from .euler import ProblemData, brenier_objective, compute_derived, euler_objective
from .fields import DualState, VectorField, eig_range_sym, norm
from .gamma import shifted_dual_objective
from .grid import SYM_WEIGHTS, Grid, make_grid
from .maximize import (
    MaxOptions,
    euler_dual_objective,
    maximize,
    ns_dual_objective,
    nsp_dual_objective,
)
from .navier_stokes import compatibility_residual, ns_objective, nsp_objective
from .verification import (
    consistency_experiment,
    exact_solution,
    fd_gradient_check,
    random_dual,
    random_problem,
    sup_representation_check,
)

__all__ = ["run_battery"]


def _row(check: str, value: float, bound: float, passed: bool, note: str = "") -> dict:
    return {"check": check, "value": float(value), "bound": float(bound),
            "passed": bool(passed), "note": note}


def _problem_scale(prob: ProblemData) -> float:
    from .fields import inner

    return 1.0 + prob.a_v * inner(prob.vbar, prob.vbar) + prob.a_w * inner(
        prob.wbar, prob.wbar
    ) + prob.a_p * inner(prob.pbar, prob.pbar)


def run_battery(grid: Grid, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows: list[dict] = []

    # zero-dual identity per variant
    for variant, objective in (
        ("euler", euler_objective),
        ("ns", ns_objective),
        ("ns_pressure", nsp_objective),
    ):
        worst = 0.0
        for _ in range(5):
            prob = random_problem(grid, variant, rng)
            val = abs(objective(DualState.zeros(grid, variant), prob))
            worst = max(worst, val / _problem_scale(prob))
        rows.append(_row(f"zero_dual_{variant}", worst, 1e-12, worst <= 1e-12))

    # reduction to the quadratic-over-linear functional at unit weight
    v0_src = random_dual(grid, "euler", rng)
    prob0 = ProblemData.make(grid, a_v=1.0, v0=v0_src.lam.values[0])
    worst = 0.0
    for _ in range(10):
        dual = random_dual(grid, "euler", rng, a_v=1.0)
        der = compute_derived(dual, prob0)
        je = euler_objective(dual, prob0)
        jb = brenier_objective(der.drive, der.strain, prob0.v0)
        worst = max(worst, abs(je - jb) / max(abs(je), abs(jb), 1e-30))
    rows.append(_row("quadratic_reduction", worst, 1e-12, worst <= 1e-12))

    # finite-difference gradient checks
    checks = []
    prob_e = random_problem(grid, "euler", rng)
    checks.append(("fd_euler", euler_dual_objective(prob_e), random_dual(grid, "euler", rng, a_v=prob_e.a_v)))
    prob_n = random_problem(grid, "ns", rng)
    checks.append(("fd_ns", ns_dual_objective(prob_n), random_dual(grid, "ns", rng, a_v=prob_n.a_v)))
    prob_p = random_problem(grid, "ns_pressure", rng)
    checks.append(("fd_nsp", nsp_dual_objective(prob_p), random_dual(grid, "ns_pressure", rng, a_v=prob_p.a_v)))
    prob_s = random_problem(grid, "ns", rng, with_forcing=False)
    checks.append(("fd_shifted", shifted_dual_objective(prob_s, 0.05, 0.1), random_dual(grid, "ns", rng, a_v=prob_s.a_v)))
    for name, obj, point in checks:
        err = fd_gradient_check(obj, point, n_directions=5, step=1e-5, rng=rng)
        rows.append(_row(name, err, 1e-6, err <= 1e-6))

    # ideal steady shear: dual optimum at zero, exact primal recovery
    opts = MaxOptions(max_iters=400, grad_tol=1e-9)
    sol = exact_solution("steady_shear_2d")
    exp_grid = grid if grid.d == 2 else make_grid(2, grid.n, grid.n_t, grid.t_final)
    report, result = consistency_experiment(sol, "euler", exp_grid, opts, seed=seed)
    rows.append(_row("shear_j_opt", abs(report.j_opt), 1e-8, abs(report.j_opt) <= 1e-8))
    rows.append(_row("shear_v_rel_err", report.v_rel_err, 1e-6, report.v_rel_err <= 1e-6))

    # eigenvalue-floor sensitivity (informational)
    for floor in (1e-6, 1e-8, 1e-10):
        prob = sol.problem(exp_grid)
        obj = euler_dual_objective(prob, floor=floor * prob.a_v)
        init = random_dual(exp_grid, "euler", np.random.default_rng(seed + 1), target_norm=0.1)
        res = maximize(obj, init, opts)
        rows.append(
            _row(
                f"floor_sensitivity_{floor:g}",
                abs(res.objective_history[-1]),
                float("inf"),
                True,
                "informational",
            )
        )

    # sampled sup-representation inequality
    dual = random_dual(grid, "euler", rng)
    der = compute_derived(dual, ProblemData.make(grid, a_v=1.0))
    rep = sup_representation_check(der.drive, der.strain, 1.0, n_samples=2000, rng=rng)
    rows.append(_row("sup_repr_violation", rep["max_violation"], 1e-10, rep["max_violation"] <= 1e-10))
    rows.append(_row("sup_repr_equality", rep["max_equality_gap"], 1e-10, rep["max_equality_gap"] <= 1e-10))

    # compatibility residual refinement order
    orders = []
    for trial in range(3):
        resids = []
        for n_t in (8, 16, 32):
            g = make_grid(grid.d, grid.n, n_t, grid.t_final)
            state_rng = np.random.default_rng(seed + 100 + trial)
            dual = random_dual(g, "ns", state_rng)
            der = compute_derived(dual, ProblemData.make(g, a_v=1.0, nu=0.05), nu=0.05)
            resids.append(compatibility_residual(der.drive, der.strain, dual.chi, 0.05))
        dts = [grid.t_final / (n_t - 1) for n_t in (8, 16, 32)]
        slope = np.polyfit(np.log(dts), np.log(resids), 1)[0]
        orders.append(slope)
    worst_order = min(orders)
    rows.append(_row("compat_order", worst_order, 1.9, worst_order >= 1.9, "bound is a floor"))

    # feasibility corollaries on random feasible duals
    worst_lo, worst_hi, worst_frob, worst_lam = 0.0, 0.0, 0.0, 0.0
    for _ in range(5):
        a_v = float(rng.uniform(0.5, 2.0))
        dual = random_dual(grid, "euler", rng, a_v=a_v)
        der = compute_derived(dual, ProblemData.make(grid, a_v=a_v))
        lo, hi = eig_range_sym(der.strain.values, grid.d)
        worst_lo = max(worst_lo, float(-(lo.min()) - a_v / 2.0))
        worst_hi = max(worst_hi, float(hi.max() - (grid.d - 1) * a_v / 2.0))
        frob = np.sqrt(
            sum(w * der.strain.values[:, s] ** 2 for s, w in enumerate(SYM_WEIGHTS[grid.d]))
        )
        worst_frob = max(
            worst_frob, float(frob.max() - np.sqrt(grid.d) * (grid.d - 1) / 2.0 * a_v)
        )
        lam_n = norm(dual.lam)
        drive_n = norm(der.drive)
        slack = max(0.05, 20.0 * grid.dt**2)
        worst_lam = max(
            worst_lam, lam_n - (grid.t_final / np.sqrt(2.0)) * drive_n * (1 + slack)
        )
    rows.append(_row("eig_lower_window", worst_lo, 1e-10, worst_lo <= 1e-10))
    rows.append(_row("eig_upper_window", worst_hi, 1e-10, worst_hi <= 1e-10))
    rows.append(_row("frobenius_window", worst_frob, 1e-10, worst_frob <= 1e-10))
    rows.append(_row("lam_drive_bound", worst_lam, 0.0, worst_lam <= 0.0))
    return rows
