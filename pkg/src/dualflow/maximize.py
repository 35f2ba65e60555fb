"""Concave maximization over dual states under the eigenvalue-floor constraint.

Limited-memory quasi-Newton ascent with projection of every iterate onto the
variant's structural constraints (terminal condition, solenoidality) and a
backtracking line search that rejects any step whose smallest eigenvalue
margin dips below the floor.  The objectives here are concave on the feasible
convex set, so a local maximizer is the global one and no multistart is
needed.

Feasibility is handled by step rejection rather than a barrier: the
objective itself blows up only in directions seen by the drive field, so a
hard floor keeps the subproblem well-posed while matching the closed
feasible set of the continuous problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .euler import Infeasible, ProblemData, feasibility_floor
from .fields import DualState, eig_range_sym, min_margin_values
from .grid import SYM_WEIGHTS

__all__ = [
    "MaxOptions",
    "MaxResult",
    "DualObjective",
    "maximize",
    "feasible_step_bound",
    "euler_dual_objective",
    "ns_dual_objective",
    "nsp_dual_objective",
]


@dataclass
class MaxOptions:
    """Knobs of the ascent loop.

    Stops when the projected-gradient L2 norm falls below
    grad_tol * (1 + |J|).  ``feas_floor`` of None defers to the objective's
    own floor.
    """

    max_iters: int = 500
    grad_tol: float = 1e-9
    memory: int = 10
    backtrack: float = 0.5
    feas_floor: float | None = None
    initial_step: float = 1.0
    armijo: float = 1e-4
    max_backtracks: int = 60
    step_cap: float = 1e8
    # sufficient-increase slack at the floating-point resolution of the
    # objective; ascent is monotone only up to this amount
    noise_slack: float = 1e-14
    # stationarity polish: Newton steps solved by preconditioned CG with
    # stored-direction reorthogonalization (the dual Hessians have wide
    # spectra; plain CG loses conjugacy before resolving the tail)
    polish_rounds: int = 40
    polish_cg_iters: int = 500
    polish_basis: int = 256
    polish_fd_step: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.backtrack < 1.0):
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.max_iters < 1 or self.memory < 1:
            raise ValueError("max_iters and memory must be positive")
        if self.grad_tol <= 0 or self.initial_step <= 0:
            raise ValueError("grad_tol and initial_step must be positive")


@dataclass
class DualObjective:
    """Objective oracle handed to :func:`maximize`.

    ``value``/``gradient`` may raise Infeasible below the floor; ``project``
    enforces the variant's linear constraints; ``a_eff`` is the shift whose
    eigenvalue margin defines feasibility.  ``preconditioner`` (optional) is
    an SPD model inverse Hessian used as the initial matrix of the
    limited-memory recursion; ``hessvec`` (optional) returns the exact
    product of the negative second derivative with a direction, enabling
    exact line searches and the Newton polish once objective increments
    drop below float resolution.
    """

    value: Callable[[DualState], float]
    gradient: Callable[[DualState], DualState]
    project: Callable[[DualState], DualState]
    a_eff: float
    floor: float
    preconditioner: Callable[[DualState], DualState] | None = None
    hessvec: Callable[[DualState, DualState], DualState] | None = None


@dataclass
class MaxResult:
    state: DualState
    objective_history: list[float]
    grad_norm_history: list[float]
    margin_history: list[float]
    step_history: list[float]
    iterate_stats: list[dict]
    termination: str  # converged | max_iters | stalled
    iterations: int
    grad_tol: float


def _vbar_sq_mean(prob: ProblemData) -> float:
    v = prob.vbar.values
    return float(np.einsum("tc...,tc...->t...", v, v).mean())


def euler_dual_objective(prob: ProblemData, floor: float | None = None) -> DualObjective:
    from .euler import euler_gradient, euler_hessvec_factory, euler_objective
    from .precondition import euler_preconditioner

    if floor is None:
        floor = feasibility_floor(prob)
    return DualObjective(
        value=lambda d: euler_objective(d, prob, floor),
        gradient=lambda d: euler_gradient(d, prob, floor),
        project=lambda d: d.project(),
        a_eff=prob.a_v,
        floor=floor,
        preconditioner=euler_preconditioner(prob.grid, prob.a_v, _vbar_sq_mean(prob)),
        hessvec=euler_hessvec_factory(prob, floor),
    )


def ns_dual_objective(prob: ProblemData, floor: float | None = None) -> DualObjective:
    from .navier_stokes import ns_gradient, ns_hessvec_factory, ns_objective
    from .precondition import ns_preconditioner

    if floor is None:
        floor = feasibility_floor(prob)
    return DualObjective(
        value=lambda d: ns_objective(d, prob, floor),
        gradient=lambda d: ns_gradient(d, prob, floor),
        project=lambda d: d.project(),
        a_eff=prob.a_v,
        floor=floor,
        preconditioner=ns_preconditioner(prob.grid, prob.a_v, prob.a_w, _vbar_sq_mean(prob)),
        hessvec=ns_hessvec_factory(prob, floor),
    )


def nsp_dual_objective(prob: ProblemData, floor: float | None = None) -> DualObjective:
    from .navier_stokes import nsp_gradient, nsp_hessvec_factory, nsp_objective
    from .precondition import ns_preconditioner

    if floor is None:
        floor = feasibility_floor(prob)
    return DualObjective(
        value=lambda d: nsp_objective(d, prob, floor),
        gradient=lambda d: nsp_gradient(d, prob, floor),
        project=lambda d: d.project(),
        a_eff=prob.a_v,
        floor=floor,
        preconditioner=ns_preconditioner(prob.grid, prob.a_v, prob.a_w, _vbar_sq_mean(prob)),
        hessvec=nsp_hessvec_factory(prob, floor),
    )


def _margin_min(dual: DualState, a_eff: float) -> float:
    strain = dual.grid.sym_grad(dual.lam.values)
    return float(min_margin_values(a_eff, strain, dual.grid.d).min())


def _state_stats(dual: DualState, a_eff: float) -> dict:
    grid = dual.grid
    strain = grid.sym_grad(dual.lam.values)
    lo, hi = eig_range_sym(strain, grid.d)
    frob = np.sqrt(
        sum(w * strain[:, s] ** 2 for s, w in enumerate(SYM_WEIGHTS[grid.d]))
    )
    return {
        "strain_eig_min": float(lo.min()),
        "strain_eig_max": float(hi.max()),
        "strain_frob_max": float(frob.max()),
        "max_abs_div_lam": float(np.abs(grid.div(dual.lam.values)).max()),
        "terminal_max": float(np.abs(dual.lam.values[-1]).max()),
    }


def feasible_step_bound(
    current: DualState,
    direction: DualState,
    prob: ProblemData | None = None,
    a_eff: float | None = None,
    floor: float | None = None,
    alpha_max: float = 1e8,
    bisect_iters: int = 60,
) -> float:
    """Largest step along ``direction`` keeping the eigenvalue margin above the floor.

    The strain is affine in the step, so the node-wise minimum eigenvalue is
    concave in it and bisection on the crossing is exact.  A Weyl bound on
    the direction's strain short-circuits the common case where feasibility
    cannot bind.
    """
    if a_eff is None:
        a_eff = prob.a_v if prob is not None else 1.0
    if floor is None:
        floor = feasibility_floor(prob) if prob is not None else 1e-8 * a_eff
    grid = current.grid
    d = grid.d
    strain_cur = grid.sym_grad(current.lam.values)
    strain_dir = grid.sym_grad(direction.lam.values)

    margin0 = float(min_margin_values(a_eff, strain_cur, d).min())
    frob_dir = np.sqrt(
        sum(w * strain_dir[:, s] ** 2 for s, w in enumerate(SYM_WEIGHTS[d]))
    )
    dir_scale = float(frob_dir.max())
    # Weyl bound: margin(alpha) >= margin0 - 2*alpha*max||strain_dir||_F
    if dir_scale == 0.0 or margin0 - 2.0 * alpha_max * dir_scale >= floor:
        return alpha_max

    def margin_at(alpha: float) -> float:
        return float(
            min_margin_values(a_eff, strain_cur + alpha * strain_dir, d).min()
        )

    if margin_at(alpha_max) >= floor:
        return alpha_max
    if margin0 < floor:
        return 0.0
    lo, hi = 0.0, alpha_max
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if margin_at(mid) >= floor:
            lo = mid
        else:
            hi = mid
    return lo


def _two_loop(g: DualState, s_list, y_list, rho_list, precondition=None) -> DualState:
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * s.inner(q)
        alphas.append(a)
        q = q.add_scaled(y, -a)
    if precondition is not None:
        q = precondition(q)
        if s_list:
            s, y = s_list[-1], y_list[-1]
            gamma = s.inner(y) / max(y.inner(precondition(y)), 1e-300)
            if gamma > 0:
                q = q.scale(gamma)
    elif s_list:
        s, y = s_list[-1], y_list[-1]
        gamma = s.inner(y) / y.inner(y)
        q = q.scale(gamma)
    for s, y, rho, a in zip(s_list, y_list, rho_list, reversed(alphas)):
        b = rho * y.inner(q)
        q = q.add_scaled(s, a - b)
    return q


def _make_hessvec(objective, opts, state, grad):
    """Curvature products at ``state``: analytic when the objective provides
    them, central gradient differences otherwise."""
    if objective.hessvec is not None:
        return lambda v: objective.hessvec(state, v)
    state_scale = 1.0 + state.norm()

    def fd_hessvec(v):
        vn = v.norm()
        if vn == 0.0:
            return None
        h = opts.polish_fd_step * state_scale / vn
        for _ in range(6):
            try:
                gp = objective.gradient(objective.project(state.add_scaled(v, h)))
                gm = objective.gradient(objective.project(state.add_scaled(v, -h)))
                return gm.add_scaled(gp, -1.0).scale(0.5 / h)
            except Infeasible:
                h *= 0.25
        return None

    return fd_hessvec


def _pcg_newton_direction(objective, opts, state, grad, precond, target):
    """Approximate solve of (-Hessian) x = grad by preconditioned CG.

    New directions are reorthogonalized (in the curvature inner product)
    against a window of stored ones: the dual Hessians have spectra wide
    enough that the plain short recurrence loses conjugacy long before the
    tail of the gradient is resolved.  Stops on the residual target, on
    nonpositive curvature (flat directions of the dual objective are
    genuine) or on a runaway step.
    """
    state_scale = 1.0 + state.norm()
    hessvec = _make_hessvec(objective, opts, state, grad)
    b_norm = grad.norm()
    x = None
    r = grad.copy()
    z = precond(r)
    rz = r.inner(z)
    if rz <= 0.0:
        return z
    p = z
    rtol = max(0.02 * target / max(b_norm, 1e-300), 1e-8)
    p_hist: list[DualState] = []
    hp_hist: list[DualState] = []
    php_hist: list[float] = []
    for _ in range(opts.polish_cg_iters):
        hp = hessvec(p)
        if hp is None:
            break
        php = p.inner(hp)
        if php <= 1e-13 * p.norm() * max(hp.norm(), 1e-300):
            break
        a = rz / php
        if a * p.norm() > 1e4 * state_scale:
            break
        x = p.scale(a) if x is None else x.add_scaled(p, a)
        r = r.add_scaled(hp, -a)
        if r.norm() <= rtol * b_norm:
            break
        z = precond(r)
        rz_new = r.inner(z)
        if rz_new <= 0.0:
            break
        p_hist.append(p)
        hp_hist.append(hp)
        php_hist.append(php)
        if len(p_hist) > opts.polish_basis:
            p_hist.pop(0)
            hp_hist.pop(0)
            php_hist.pop(0)
        p_new = z
        for pj, hpj, phpj in zip(p_hist, hp_hist, php_hist):
            p_new = p_new.add_scaled(pj, -p_new.inner(hpj) / phpj)
        p = p_new
        rz = rz_new
    return x if x is not None else precond(grad)


def _polish(objective, opts, a_eff, floor, state, value, grad, on_accept):
    """Drive the stationarity residual below tolerance once objective
    increments are no longer resolvable in floating point.  Accepts only
    steps that do not lose objective (beyond float slack) and strictly
    shrink the gradient norm; returns the final gradient."""
    precond = objective.preconditioner if objective.preconditioner else (lambda d: d)
    gnorm = grad.norm()
    for _ in range(opts.polish_rounds):
        target = opts.grad_tol * (1.0 + abs(value))
        if gnorm <= target:
            break
        delta = _pcg_newton_direction(objective, opts, state, grad, precond, target)
        cap = feasible_step_bound(state, delta, a_eff=a_eff, floor=floor, alpha_max=1.0)
        alpha = min(1.0, 0.999 * cap)
        slack = opts.noise_slack * (1.0 + abs(value))
        accepted = False
        cand = cand_value = cand_grad = None
        for _bt in range(20):
            if alpha <= 0.0:
                break
            cand = objective.project(state.add_scaled(delta, alpha))
            if _margin_min(cand, a_eff) < floor:
                alpha *= 0.5
                continue
            try:
                cand_value = objective.value(cand)
            except Infeasible:
                alpha *= 0.5
                continue
            if cand_value < value - slack:
                alpha *= 0.5
                continue
            cand_grad = objective.gradient(cand)
            if cand_grad.norm() < gnorm * (1.0 - 1e-6):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        state, value, grad, gnorm = cand, cand_value, cand_grad, cand_grad.norm()
        on_accept(state, value, gnorm, alpha)
    return grad


def maximize(objective: DualObjective, init: DualState, opts: MaxOptions) -> MaxResult:
    """Ascend the concave dual objective from ``init`` until the gradient test holds.

    An infeasible init is shrunk toward zero (always feasible) before the
    loop starts.  Every accepted iterate is re-projected; the line search
    never evaluates outside the feasible region thanks to the step bound.
    """
    floor = opts.feas_floor if opts.feas_floor is not None else objective.floor
    a_eff = objective.a_eff

    state = objective.project(init)
    shrink = 0
    while _margin_min(state, a_eff) < floor and shrink < 100:
        state = state.scale(0.5)
        shrink += 1
    if _margin_min(state, a_eff) < floor:
        state = DualState.zeros(state.grid, state.variant)

    value = objective.value(state)
    grad = objective.gradient(state)
    gnorm = grad.norm()

    obj_hist: list[float] = []
    gnorm_hist: list[float] = []
    margin_hist: list[float] = []
    step_hist: list[float] = []
    stats: list[dict] = []

    def record(step: float):
        obj_hist.append(value)
        gnorm_hist.append(gnorm)
        margin_hist.append(_margin_min(state, a_eff))
        step_hist.append(step)
        stats.append(_state_stats(state, a_eff))

    record(0.0)
    s_list: list[DualState] = []
    y_list: list[DualState] = []
    rho_list: list[float] = []
    termination = "max_iters"
    iterations = 0

    for _ in range(opts.max_iters):
        if gnorm <= opts.grad_tol * (1.0 + abs(value)):
            termination = "converged"
            break
        direction = _two_loop(grad, s_list, y_list, rho_list, objective.preconditioner)
        slope = grad.inner(direction)
        if slope <= 0.0:  # quasi-Newton direction lost ascent; fall back
            direction = (
                objective.preconditioner(grad) if objective.preconditioner else grad
            )
            slope = grad.inner(direction)
            if slope <= 0.0:
                direction = grad
                slope = gnorm * gnorm
        cap = feasible_step_bound(
            state, direction, a_eff=a_eff, floor=floor, alpha_max=opts.step_cap
        )
        if s_list or objective.preconditioner is not None:
            alpha = min(1.0, 0.999 * cap)
        else:
            dnorm = direction.norm()
            alpha = min(opts.initial_step / max(dnorm, 1e-30), opts.initial_step, 0.999 * cap)

        slack = opts.noise_slack * (1.0 + abs(value))
        if opts.armijo * alpha * slope < slack:
            # objective increments are below float resolution: pick the step
            # by the exact minimizer of the local quadratic model instead
            hessvec = _make_hessvec(objective, opts, state, grad)
            hp = hessvec(direction)
            if hp is not None:
                php = direction.inner(hp)
                if php > 0.0:
                    alpha = min(slope / php, 0.999 * cap)

        accepted = False
        cand = None
        cand_value = value
        for _bt in range(opts.max_backtracks + 1):
            if alpha <= 0.0:
                break
            cand = objective.project(state.add_scaled(direction, alpha))
            if _margin_min(cand, a_eff) < floor:
                alpha *= opts.backtrack
                continue
            try:
                cand_value = objective.value(cand)
            except Infeasible:
                alpha *= opts.backtrack
                continue
            if cand_value - value >= opts.armijo * alpha * slope - slack:
                accepted = True
                break
            alpha *= opts.backtrack
        if not accepted:
            termination = "stalled"
            break

        new_grad = objective.gradient(cand)
        s = cand.add_scaled(state, -1.0)
        y = grad.add_scaled(new_grad, -1.0)  # -(g_new - g_old), curvature for -J
        sy = s.inner(y)
        if sy > 1e-12 * s.norm() * y.norm():
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > opts.memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)

        state, value, grad, gnorm = cand, cand_value, new_grad, new_grad.norm()
        iterations += 1
        record(alpha)
    else:
        termination = "max_iters"

    if termination != "converged" and gnorm > 0.0:
        accepted_steps = []

        def on_polish(st, val, gn, al):
            nonlocal state, value, gnorm
            state, value, gnorm = st, val, gn
            record(al)
            accepted_steps.append(al)

        grad = _polish(objective, opts, a_eff, floor, state, value, grad, on_polish)
        gnorm = grad.norm()
        iterations += len(accepted_steps)
        if gnorm <= opts.grad_tol * (1.0 + abs(value)):
            termination = "converged"

    return MaxResult(
        state=state,
        objective_history=obj_hist,
        grad_norm_history=gnorm_hist,
        margin_history=margin_hist,
        step_history=step_hist,
        iterate_stats=stats,
        termination=termination,
        iterations=iterations,
        grad_tol=opts.grad_tol,
    )
