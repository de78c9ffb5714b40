"""Boundary cost, flux constraint, and their directional derivatives.

The cost integrates a C^1 integrand over the cost-carrying boundary
components weighted by orbit speed; the constraint integrates the squared
boundary flux ``(grad y . grad g)^2`` (plain dt measure) over every
component and vanishes exactly when the state satisfies the homogeneous
flux condition on the whole boundary.

Derivative assembly differentiates the *discrete* quantities exactly:
values of the state along orbits are read from the field interpolant, so
their position derivative is the interpolant gradient; the flux uses the
interpolated difference-gradient fields, so its position derivative is the
exact Jacobian of those interpolants.  With this bookkeeping the assembled
directional derivatives match central/forward finite differences of the
evaluated functionals down to integrator noise, which is what the
first-order ratio checks require.  Moving-endpoint (period) contributions
enter through the period slope times the endpoint integrand, including the
speed weight for the cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import ScalarField, gradient_field
from .hamiltonian import BoundaryTrace, OrbitVariation, solve_variations_batch, _ROT
from .levelset import LevelFunction
from .state import AnalyticState, ControlPair, solve_state_variation


def simpson_weights(times: np.ndarray) -> np.ndarray:
    """Composite Simpson weights for an odd count of uniform samples."""
    n = times.size - 1
    if n % 2 != 0:
        raise ValueError("Simpson rule needs an even number of intervals")
    dt = times[1] - times[0]
    if not np.allclose(np.diff(times), dt, rtol=1e-9, atol=1e-12):
        raise ValueError("Simpson rule needs uniform samples")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (dt / 3.0)


# ---------------------------------------------------------------------------
# cost integrands


@dataclass(frozen=True)
class CostIntegrand:
    """j(position, state) with closed-form position gradient and state slope."""

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_pos: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d_state: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "custom"


def tracking_cost(target: AnalyticState) -> CostIntegrand:
    """(y - y_d(sigma))^2 against a closed-form target trace."""

    def value(pts, y):
        return (y - target.value(pts)) ** 2

    def grad_pos(pts, y):
        return -2.0 * (y - target.value(pts))[:, None] * target.gradient(pts)

    def d_state(pts, y):
        return 2.0 * (y - target.value(pts))

    return CostIntegrand(value, grad_pos, d_state, name="tracking")


def perimeter_cost() -> CostIntegrand:
    def value(pts, y):
        return np.ones(np.atleast_2d(pts).shape[0])

    def grad_pos(pts, y):
        return np.zeros((np.atleast_2d(pts).shape[0], 2))

    def d_state(pts, y):
        return np.zeros(np.atleast_2d(pts).shape[0])

    return CostIntegrand(value, grad_pos, d_state, name="perimeter")


# ---------------------------------------------------------------------------
# state evaluation flavours


class InterpolatedState:
    """Reads the discrete state along curves through field interpolants."""

    def __init__(self, pair: ControlPair):
        self._y = pair.y
        self._gx, self._gy = pair.grad_y

    def y_at(self, pts):
        return self._y.eval(pts)

    def y_grad_interp_at(self, pts):
        return self._y.eval_gradient(pts)

    def grad_y_at(self, pts):
        return np.column_stack([self._gx.eval(pts), self._gy.eval(pts)])

    def grad_y_jac_at(self, pts):
        jac = np.empty((np.atleast_2d(pts).shape[0], 2, 2))
        jac[:, 0, :] = self._gx.eval_gradient(pts)
        jac[:, 1, :] = self._gy.eval_gradient(pts)
        return jac


class AnalyticStateEval:
    """Closed-form state evaluation (exact ground truth for manufactured pairs)."""

    def __init__(self, state: AnalyticState):
        if state.hessian is None:
            raise ValueError("analytic state evaluation needs a hessian")
        self._s = state

    def y_at(self, pts):
        return self._s.value(pts)

    def y_grad_interp_at(self, pts):
        return self._s.gradient(pts)

    def grad_y_at(self, pts):
        return self._s.gradient(pts)

    def grad_y_jac_at(self, pts):
        return self._s.hessian(pts)


# ---------------------------------------------------------------------------
# evaluation context


class _SampleTable:
    """Vectorized per-orbit samples shared by every functional evaluation."""

    def __init__(self, g: LevelFunction, trace: BoundaryTrace, state):
        self.trace = trace
        self.times = trace.times
        self.weights = simpson_weights(trace.times)
        self.points = trace.points
        self.velocities = trace.velocities
        self.speed = np.linalg.norm(trace.velocities, axis=1)
        self.grad_g = g.gradient(trace.points)
        self.hess_g = g.hessian(trace.points)
        self.y = state.y_at(trace.points)
        self.y_grad_interp = state.y_grad_interp_at(trace.points)
        self.grad_y = state.grad_y_at(trace.points)
        self.grad_y_jac = state.grad_y_jac_at(trace.points)
        self.flux = np.einsum("ni,ni->n", self.grad_y, self.grad_g)


class EvalContext:
    """A control pair, the traced boundary components, and the cost subset."""

    def __init__(
        self,
        pair: ControlPair,
        traces: Sequence[BoundaryTrace],
        cost_components: Sequence[int] = (0,),
        state=None,
    ):
        self.pair = pair
        self.traces = tuple(traces)
        self.cost_components = tuple(cost_components)
        self.state = state if state is not None else InterpolatedState(pair)
        self._tables: dict[int, _SampleTable] = {}

    @property
    def g(self) -> LevelFunction:
        return self.pair.g

    def table(self, i: int) -> _SampleTable:
        if i not in self._tables:
            self._tables[i] = _SampleTable(self.g, self.traces[i], self.state)
        return self._tables[i]


# ---------------------------------------------------------------------------
# functional values


def eval_cost(ctx: EvalContext, j: CostIntegrand) -> float:
    """Speed-weighted boundary integral of j over the cost components."""
    total = 0.0
    for c in ctx.cost_components:
        tb = ctx.table(c)
        total += float(tb.weights @ (j.value(tb.points, tb.y) * tb.speed))
    return total


def eval_constraint(ctx: EvalContext) -> float:
    """Squared boundary flux integrated (plain dt) over all components."""
    total = 0.0
    for c in range(len(ctx.traces)):
        tb = ctx.table(c)
        total += float(tb.weights @ (tb.flux**2))
    return total


def eval_neumann_form(ctx: EvalContext) -> float:
    """Normal-derivative form: squared flux over |grad g|^2, speed-weighted."""
    total = 0.0
    for c in range(len(ctx.traces)):
        tb = ctx.table(c)
        total += float(tb.weights @ (tb.flux**2 / tb.speed))
    return total


# ---------------------------------------------------------------------------
# directional derivatives

def _q_flux_coupling(grad_q: np.ndarray, grad_g: np.ndarray) -> np.ndarray:
    # seam for fault-injection checks: the state-variation part of the flux
    return np.einsum("ni,ni->n", grad_q, grad_g)


def _direction_fields(ctx, h, v):
    """State variation of the direction and its curve evaluators."""
    if h is None and v is None:
        return None, None, None
    q = solve_state_variation(ctx.pair, h, v)
    qx, qy = gradient_field(q)
    return q, qx, qy


def _constraint_term(ctx, c, tb, h, var: OrbitVariation | None, q_fields) -> float:
    two_flux = 2.0 * tb.flux
    bracket = np.zeros_like(tb.flux)
    if h is not None:
        bracket += np.einsum("ni,ni->n", tb.grad_y, h.gradient(tb.points))
    if q_fields[0] is not None:
        grad_q = np.column_stack([q_fields[1].eval(tb.points), q_fields[2].eval(tb.points)])
        bracket += _q_flux_coupling(grad_q, tb.grad_g)
    if var is not None:
        moved = np.einsum("nij,nj->ni", tb.grad_y_jac, var.values)
        bracket += np.einsum("ni,ni->n", moved, tb.grad_g)
        bracket += np.einsum("ni,nij,nj->n", tb.grad_y, tb.hess_g, var.values)
    term = float(tb.weights @ (two_flux * bracket))
    if var is not None:
        term += var.period_derivative * float(tb.flux[-1] ** 2)
    return term


def _cost_term(ctx, c, tb, j, h, var: OrbitVariation | None, q_fields) -> float:
    jv = j.value(tb.points, tb.y)
    term = 0.0
    if var is not None:
        w = var.values
        term += float(tb.weights @ (np.einsum("ni,ni->n", j.grad_pos(tb.points, tb.y), w) * tb.speed))
        moved = np.einsum("ni,ni->n", tb.y_grad_interp, w)
    else:
        w = None
        moved = np.zeros_like(tb.y)
    dstate = moved
    if q_fields[0] is not None:
        dstate = dstate + q_fields[0].eval(tb.points)
    term += float(tb.weights @ (j.d_state(tb.points, tb.y) * dstate * tb.speed))
    if var is not None:
        w_prime = np.einsum("ij,njk,nk->ni", _ROT, tb.hess_g, w)
        if h is not None:
            w_prime += h.gradient(tb.points) @ _ROT.T
        term += float(tb.weights @ (jv * np.einsum("ni,ni->n", tb.velocities, w_prime) / tb.speed))
        term += var.period_derivative * float(jv[-1] * tb.speed[-1])
    return term


def derivatives_batch(
    ctx: EvalContext,
    j: CostIntegrand | None,
    directions: Sequence[tuple[LevelFunction | None, ScalarField | None]],
) -> list[tuple[float, float]]:
    """(cost, constraint) directional derivatives for many directions.

    Variation solves are batched per boundary component; each direction
    needs one extra state solve for its PDE variation.  The cost entry is
    None when no integrand is supplied.
    """
    n_comp = len(ctx.traces)
    var_by_dir: list[dict[int, OrbitVariation]] = [dict() for _ in directions]
    with_h = [k for k, (h, _) in enumerate(directions) if h is not None]
    for ci in range(n_comp):
        if not with_h:
            break
        hs = [directions[k][0] for k in with_h]
        sols = solve_variations_batch(ctx.g, hs, ctx.traces[ci])
        for k, sol in zip(with_h, sols):
            var_by_dir[k][ci] = sol
    out = []
    for k, (h, v) in enumerate(directions):
        q_fields = _direction_fields(ctx, h, v)
        d_cost = 0.0 if j is not None else None
        d_con = 0.0
        for ci in range(n_comp):
            tb = ctx.table(ci)
            var = var_by_dir[k].get(ci)
            d_con += _constraint_term(ctx, ci, tb, h, var, q_fields)
            if j is not None and ci in ctx.cost_components:
                d_cost += _cost_term(ctx, ci, tb, j, h, var, q_fields)
        out.append((d_cost, d_con))
    return out


def cost_derivative(
    ctx: EvalContext, j: CostIntegrand, h: LevelFunction | None, v: ScalarField | None
) -> float:
    """Directional derivative of the cost in the direction (h, v)."""
    return derivatives_batch(ctx, j, [(h, v)])[0][0]


def constraint_derivative(
    ctx: EvalContext, h: LevelFunction | None, v: ScalarField | None
) -> float:
    """Directional derivative of the flux constraint in the direction (h, v)."""
    return derivatives_batch(ctx, None, [(h, v)])[0][1]


def constraint_qualification(ctx: EvalContext) -> float:
    """Constraint slope along the current pair itself (the scalar test value)."""
    return constraint_derivative(ctx, ctx.g, ctx.pair.u)
