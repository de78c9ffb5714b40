"""Augmented-Lagrangian descent over level-set coefficients and the control.

The merit function is ``cost + k * constraint + rho/2 * constraint^2``.
For a frozen geometry both functionals are exactly quadratic in the
control, so the control block is eliminated by a preconditioned
conjugate-gradient solve of the weighted least-squares subproblem (the
gradient of ``cost + kappa * constraint`` with respect to the control is
the volume adjoint times the squared level weight; the preconditioner
undoes that squared weight, which is what makes the subproblem tractable).
Geometry steps then descend the reduced merit: every Armijo trial re-runs
the census, re-traces the boundary, and re-solves the control subproblem
from a warm start, so the line search compares geometries at matched
control optimality.  Trials that change the hole count are accepted like
any other when admissible and decreasing; pins are re-seeded from the new
census after every accepted step and the event is logged.

Outer iterations apply the classical multiplier update, growing the
penalty only while feasibility stagnates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adjoint import solve_adjoint_pde
from .errors import AnchorError, LineSearchError, TraceError
from .functionals import (
    CostIntegrand,
    EvalContext,
    derivatives_batch,
    eval_constraint,
    eval_cost,
)
from .grid import Grid, ScalarField
from .hamiltonian import trace_orbit
from .levelset import (
    ComponentCensus,
    LevelFunction,
    check_admissible,
    extract_components,
    pin_nullspace_projector,
)
from .state import solve_state

ARMIJO_C1 = 1e-4
ARMIJO_SHRINK = 0.5
ARMIJO_MAX_TRIALS = 30
RHO_CAP = 1e8


@dataclass(frozen=True)
class Problem:
    """Fixed data of one optimization run."""

    grid: Grid
    source: ScalarField
    cost: CostIntegrand
    anchor: tuple[float, float]
    cost_all_components: bool = False
    n_samples: int = 512
    ode_rtol: float = 1e-10
    ode_atol: float = 1e-12
    control_iters: int = 200
    control_trial_iters: int = 60
    control_tol: float = 1e-9


@dataclass(eq=False)
class Evaluation:
    """One full pipeline evaluation at a candidate pair."""

    g: LevelFunction
    u: ScalarField
    census: ComponentCensus
    ctx: EvalContext
    cost: float
    constraint: float

    def merit(self, k: float, rho: float) -> float:
        return self.cost + k * self.constraint + 0.5 * rho * self.constraint**2


def _cost_ids(problem: Problem, n_components: int) -> tuple[int, ...]:
    return tuple(range(n_components)) if problem.cost_all_components else (0,)


def evaluate(problem: Problem, g: LevelFunction, u: ScalarField) -> Evaluation:
    """Census, traces, state solve and functional values; re-pins at seeds."""
    census = extract_components(g, problem.grid, problem.anchor)
    g = g.with_pins([c.seed for c in census.components])
    traces = [
        trace_orbit(
            g,
            comp.seed,
            n_samples=problem.n_samples,
            component_id=i,
            l_max=100.0 * problem.grid.diameter,
            rtol=problem.ode_rtol,
            atol=problem.ode_atol,
        )
        for i, comp in enumerate(census.components)
    ]
    pair = solve_state(g, u, problem.source)
    ctx = EvalContext(pair, traces, _cost_ids(problem, len(traces)))
    return Evaluation(
        g=g,
        u=u,
        census=census,
        ctx=ctx,
        cost=eval_cost(ctx, problem.cost),
        constraint=eval_constraint(ctx),
    )


def _reuse_evaluation(problem: Problem, ev: Evaluation, u: ScalarField) -> Evaluation:
    """Evaluation at a new control with the geometry (and traces) unchanged."""
    pair = solve_state(ev.g, u, problem.source)
    ctx = EvalContext(pair, ev.ctx.traces, _cost_ids(problem, len(ev.ctx.traces)))
    return Evaluation(
        g=ev.g,
        u=u,
        census=ev.census,
        ctx=ctx,
        cost=eval_cost(ctx, problem.cost),
        constraint=eval_constraint(ctx),
    )


# ---------------------------------------------------------------------------
# control subproblem


def _control_gradient(problem: Problem, ev: Evaluation, kappa: float) -> np.ndarray:
    """Gradient of cost + kappa * constraint with respect to control values."""
    p = solve_adjoint_pde(ev.ctx, problem.cost, kappa)
    grid = problem.grid
    return grid.hx * grid.hy * p.values * ev.ctx.pair.gplus**2


def control_solve(
    problem: Problem,
    ev: Evaluation,
    kappa: float,
    k: float,
    rho: float,
    max_iter: int | None = None,
    rel_tol: float | None = None,
) -> Evaluation:
    """Minimize the quadratic control subproblem at frozen geometry.

    Preconditioned conjugate gradients on ``cost + kappa * constraint``
    (exactly quadratic in the control), warm-started at the current
    control; the update is accepted through a plain backtracking guard on
    the true merit so the outer monotonicity invariant survives inexact
    solves.
    """
    max_iter = problem.control_iters if max_iter is None else max_iter
    rel_tol = problem.control_tol if rel_tol is None else rel_tol
    grid = problem.grid
    gplus2 = ev.ctx.pair.gplus**2
    clamp = 0.01 * (1.0 + float(gplus2.max()))
    precond = 1.0 / (grid.hx * grid.hy * (gplus2 + clamp)) ** 2

    grad0 = _control_gradient(problem, ev, kappa)

    def hess_action(v: np.ndarray) -> np.ndarray:
        shifted = _reuse_evaluation(problem, ev, ev.u + ScalarField(grid, v))
        return _control_gradient(problem, shifted, kappa) - grad0

    x = np.zeros(grid.shape)
    r = -grad0.copy()
    z = precond * r
    p = z.copy()
    rz = float(np.sum(r * z))
    r0 = float(np.linalg.norm(r))
    if r0 == 0.0:
        return ev
    for _ in range(max_iter):
        if np.linalg.norm(r) <= rel_tol * r0:
            break
        hp = hess_action(p)
        php = float(np.sum(p * hp))
        if php <= 0.0:
            break
        alpha = rz / php
        x += alpha * p
        r -= alpha * hp
        z = precond * r
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    # monotone guard on the true merit (the penalty term is quartic in u)
    merit0 = ev.merit(k, rho)
    step = 1.0
    for _ in range(25):
        cand = _reuse_evaluation(problem, ev, ev.u + ScalarField(grid, step * x))
        if cand.merit(k, rho) <= merit0:
            return cand
        step *= 0.5
    return ev


# ---------------------------------------------------------------------------
# optimizer state and the specified operations


@dataclass(eq=False)
class OptState:
    """Mutable optimizer state: current pair, multiplier data and history."""

    g: LevelFunction
    u: ScalarField
    k: float
    rho: float
    census: ComponentCensus
    iter: int = 0
    history: list[dict] = field(default_factory=list)
    evaluation: Evaluation | None = None
    constraint_at_update: float = np.inf
    last_step: float | None = None
    stop_reason: str = "running"


@dataclass(eq=False)
class Direction:
    h: LevelFunction
    v: ScalarField
    grad_norm: float
    slope: float
    coeff_grad: np.ndarray


def descent_direction(problem: Problem, state: OptState) -> Direction:
    """Negative merit gradient over pinned coefficient directions and control."""
    ev = state.evaluation
    ctx = ev.ctx
    g = ev.g
    k_eff = state.k + state.rho * ev.constraint
    proj = pin_nullspace_projector(g.terms, g.pins)
    dirs = [
        (LevelFunction(g.terms, proj[:, i], pins=g.pins), None)
        for i in range(len(g.terms))
    ]
    pairs = derivatives_batch(ctx, problem.cost, dirs)
    coeff_grad = np.array([dj + k_eff * ds for dj, ds in pairs])
    p_eff = solve_adjoint_pde(ctx, problem.cost, k_eff)
    v_grad = p_eff.values * ev.ctx.pair.gplus**2
    grid = problem.grid
    sq = float(coeff_grad @ coeff_grad) + grid.hx * grid.hy * float(np.sum(v_grad**2))
    h_dir = LevelFunction(g.terms, -(proj @ coeff_grad), pins=g.pins)
    return Direction(
        h=h_dir,
        v=ScalarField(grid, -v_grad, ev.u.interp_order),
        grad_norm=float(np.sqrt(sq)),
        slope=-sq,
        coeff_grad=coeff_grad,
    )


def line_search(
    problem: Problem,
    state: OptState,
    direction: Direction,
    kappa: float | None = None,
) -> tuple[Evaluation, float]:
    """Backtracking Armijo on the merit; topology changes are acceptable.

    When ``kappa`` is given, every trial re-solves the control subproblem
    from a warm start before the comparison, so the search acts on the
    control-reduced merit.
    """
    ev0 = state.evaluation
    merit0 = ev0.merit(state.k, state.rho)
    gn2 = float(direction.coeff_grad @ direction.coeff_grad)
    if gn2 == 0.0 and kappa is not None:
        raise LineSearchError("zero geometry direction", {"merit0": merit0})
    slope = direction.slope if kappa is None else -gn2
    cap = (1.0 + float(np.max(np.abs(ev0.g.coeffs)))) / (
        4.0 * (1.0 + float(np.max(np.abs(direction.h.coeffs))))
    )
    lam = cap if state.last_step is None else min(4.0 * state.last_step, cap)
    if direction.grad_norm == 0.0:
        return ev0, 0.0
    failures = []
    for _ in range(ARMIJO_MAX_TRIALS):
        g_t = ev0.g.add_coeffs(lam * direction.h.coeffs)
        u_t = ev0.u if kappa is not None else ev0.u + lam * direction.v
        report = check_admissible(g_t, problem.grid)
        if not report.admissible:
            failures.append((lam, "inadmissible:" + ",".join(report.violations)))
            lam *= ARMIJO_SHRINK
            continue
        try:
            ev = evaluate(problem, g_t, u_t)
        except (AnchorError, TraceError) as exc:
            failures.append((lam, type(exc).__name__))
            lam *= ARMIJO_SHRINK
            continue
        if kappa is not None:
            ev = control_solve(
                problem,
                ev,
                kappa,
                state.k,
                state.rho,
                max_iter=problem.control_trial_iters,
                rel_tol=1e-6,
            )
        if ev.merit(state.k, state.rho) <= merit0 + ARMIJO_C1 * lam * slope:
            return ev, lam
        failures.append((lam, "no_decrease"))
        lam *= ARMIJO_SHRINK
    raise LineSearchError(
        "no acceptable step after backtracking",
        diagnostics={"merit0": merit0, "slope": slope, "trials": failures},
    )


def multiplier_update(state: OptState) -> None:
    """Classical augmented-Lagrangian update of multiplier and penalty."""
    s = state.evaluation.constraint
    state.k += state.rho * s
    if not (s <= state.constraint_at_update / 4.0):
        state.rho = min(10.0 * state.rho, RHO_CAP)
    state.constraint_at_update = s


def _record(state: OptState, grad_norm: float, lam: float | None, event: str | None):
    ev = state.evaluation
    state.history.append(
        {
            "iter": state.iter,
            "J": float(ev.cost),
            "S": float(ev.constraint),
            "grad_norm": float(grad_norm),
            "k": float(state.k),
            "rho": float(state.rho),
            "holes": int(ev.census.holes),
            "period_per_component": [float(t.period) for t in ev.ctx.traces],
            "step": None if lam is None else float(lam),
            "event": event,
        }
    )


def optimize(
    problem: Problem,
    g0: LevelFunction,
    u0: ScalarField,
    k0: float = 0.0,
    rho0: float = 100.0,
    max_iter: int = 200,
    inner_iter: int = 15,
    max_outer: int = 30,
    tol_inner: float = 1e-6,
    tol_feasibility: float = 1e-6,
) -> OptState:
    """Augmented-Lagrangian loop from (g0, u0): control-elimination inner
    solves plus reduced geometry descent, until the gradient and
    feasibility tolerances hold or an iteration cap fires."""
    ev = evaluate(problem, g0, u0)
    state = OptState(g=ev.g, u=ev.u, k=k0, rho=rho0, census=ev.census, evaluation=ev)
    state.constraint_at_update = ev.constraint
    direction = descent_direction(problem, state)
    _record(state, direction.grad_norm, None, "initial")
    if max_iter == 0:
        state.stop_reason = "iteration_cap"
        return state
    total = 0
    for _outer in range(max_outer):
        kappa = state.k + state.rho * state.evaluation.constraint
        ev = control_solve(problem, state.evaluation, kappa, state.k, state.rho)
        state.g, state.u, state.evaluation = ev.g, ev.u, ev
        direction = descent_direction(problem, state)
        stalled = False
        for _ in range(inner_iter):
            if direction.grad_norm <= tol_inner:
                break
            try:
                ev, lam = line_search(problem, state, direction, kappa=kappa)
            except LineSearchError:
                _record(state, direction.grad_norm, None, "line_search_stall")
                stalled = True
                break
            event = None
            if ev.census.holes != state.census.holes:
                event = f"topology:{state.census.holes}->{ev.census.holes}"
            state.g, state.u = ev.g, ev.u
            state.census = ev.census
            state.evaluation = ev
            state.last_step = lam
            state.iter += 1
            total += 1
            direction = descent_direction(problem, state)
            _record(state, direction.grad_norm, lam, event)
            if total >= max_iter:
                state.stop_reason = "iteration_cap"
                return state
        s_now = state.evaluation.constraint
        if s_now <= tol_feasibility and direction.grad_norm <= tol_inner:
            state.stop_reason = "converged"
            return state
        if stalled and state.rho >= RHO_CAP:
            state.stop_reason = "stalled"
            return state
        multiplier_update(state)
    state.stop_reason = "outer_cap"
    return state
