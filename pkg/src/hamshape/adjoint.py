"""Adjoint assembly and the first-order optimality residual.

Three adjoint objects certify stationarity together:

* a volume adjoint p, the very weak (transposition) solution of the
  elliptic operator sourced by boundary measures: the flux-weighted
  normal-derivative pairing on every component plus the cost-slope value
  pairing on cost components;
* one backward orbit adjoint per boundary component, integrating the
  transposed variation system forced by the coefficient of the orbit
  sensitivity inside the Lagrangian derivative, with a terminal condition
  that reproduces the period (moving endpoint) contribution through the
  same velocity-component branch used for the period slope itself;
* the scalar multiplier, estimated by a least-squares fit of
  cost-slope = -k * constraint-slope over a probe basis of directions.

The assembled residual pairs these adjoints with an arbitrary admissible
direction (h, v); by construction it reproduces the directional derivative
of cost + k * constraint without solving any variation system for (h, v),
which is the content of the maximum-principle identity and the property
the test suite checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateTraceError
from .grid import CurveSource, ScalarField, solve_adjoint_transposition
from .functionals import CostIntegrand, EvalContext, derivatives_batch, simpson_weights
from .hamiltonian import _ROT, orbit_table, rk4_linear
from .levelset import GaussianBump, LevelFunction, project_pinned


@dataclass(eq=False)
class OrbitAdjoint:
    """Backward adjoint along one orbit, sampled at the trace times."""

    component_id: int
    values: np.ndarray
    terminal: np.ndarray


@dataclass(eq=False)
class AdjointBundle:
    p: ScalarField
    orbit_adjoints: tuple[OrbitAdjoint, ...]
    multiplier: float


@dataclass(frozen=True)
class MultiplierEstimate:
    multiplier: float
    residual_norm: float
    reliable: bool
    records: tuple[tuple[float, float], ...]


# ---------------------------------------------------------------------------
# volume adjoint (transposition solve)


def curve_sources(ctx: EvalContext, j: CostIntegrand | None, k: float) -> list[CurveSource]:
    """Boundary measures pairing the adjoint identity with test fields."""
    sources = []
    for c in range(len(ctx.traces)):
        tb = ctx.table(c)
        w = simpson_weights(tb.times)
        normals = tb.grad_g / tb.speed[:, None]
        sources.append(
            CurveSource(
                points=tb.points,
                weights=w,
                density=2.0 * k * tb.flux * tb.speed,
                kind="normal",
                normals=normals,
            )
        )
        if j is not None and c in ctx.cost_components:
            sources.append(
                CurveSource(
                    points=tb.points,
                    weights=w,
                    density=j.d_state(tb.points, tb.y) * tb.speed,
                    kind="value",
                )
            )
    return sources


def solve_adjoint_pde(ctx: EvalContext, j: CostIntegrand | None, k: float) -> ScalarField:
    """Very weak adjoint sourced by the flux and cost boundary measures."""
    grid = ctx.pair.grid
    return solve_adjoint_transposition(grid, curve_sources(ctx, j, k), ctx.pair.u.interp_order)


# ---------------------------------------------------------------------------
# orbit adjoints (backward linear solves)


def _terminal_condition(coeff: float, v_end: np.ndarray) -> np.ndarray:
    """Endpoint adjoint value encoding theta * coeff through the robust branch."""
    if max(abs(v_end[0]), abs(v_end[1])) < 1e-12:
        raise DegenerateTraceError("endpoint velocity vanishes; trace is corrupted")
    m_t = np.zeros(2)
    if abs(v_end[1]) >= abs(v_end[0]):
        m_t[1] = -coeff / v_end[1]
    else:
        m_t[0] = -coeff / v_end[0]
    return m_t


def solve_adjoint_odes(ctx: EvalContext, j: CostIntegrand | None, k: float) -> tuple[OrbitAdjoint, ...]:
    """Backward adjoint of the variation system on every component."""
    out = []
    for c, trace in enumerate(ctx.traces):
        tab = orbit_table(ctx.g, trace)
        z = tab.z
        grad_g = tab.grad_g
        speed = tab.speed
        vel = tab.velocity
        grad_y = ctx.state.grad_y_at(z)
        jac = ctx.state.grad_y_jac_at(z)
        flux = np.einsum("ni,ni->n", grad_y, grad_g)
        # coefficient of w in the constraint-slope integrand
        jac_t_gg = np.einsum("nij,ni->nj", jac, grad_g)
        hess_gy = np.einsum("nij,ni->nj", tab.hess_g, grad_y)
        forcing = 2.0 * k * flux[:, None] * (jac_t_gg + hess_gy)
        coeff_end = k * float(flux[-1] ** 2)
        if j is not None and c in ctx.cost_components:
            y = ctx.state.y_at(z)
            y_grad_interp = ctx.state.y_grad_interp_at(z)
            jv = j.value(z, y)
            forcing = forcing + j.grad_pos(z, y) * speed[:, None]
            forcing = forcing + (j.d_state(z, y) * speed)[:, None] * y_grad_interp
            m_t_v = np.einsum("nij,ni->nj", tab.matrix, vel / speed[:, None])
            forcing = forcing + jv[:, None] * m_t_v
            coeff_end += float(jv[-1] * speed[-1])
        m_term = _terminal_condition(coeff_end, vel[-1])
        matrix_rev = np.swapaxes(tab.matrix[::-1], 1, 2)
        forcing_rev = forcing[::-1][:, None, :]
        m_tau = rk4_linear(matrix_rev, forcing_rev, tab.dt, m_term[None, :])
        m_steps = m_tau[::-1, 0, :]
        sub = m_steps[:: tab.stride // 2]
        out.append(OrbitAdjoint(component_id=c, values=sub, terminal=m_term))
    return tuple(out)


def build_bundle(ctx: EvalContext, j: CostIntegrand | None, k: float) -> AdjointBundle:
    return AdjointBundle(
        p=solve_adjoint_pde(ctx, j, k),
        orbit_adjoints=solve_adjoint_odes(ctx, j, k),
        multiplier=k,
    )


# ---------------------------------------------------------------------------
# optimality residual


def optimality_residual(
    ctx: EvalContext,
    j: CostIntegrand | None,
    k: float,
    h: LevelFunction | None,
    v: ScalarField | None,
    bundle: AdjointBundle,
) -> float:
    """Maximum-principle pairing of the adjoints with the direction (h, v).

    Equals the directional derivative of cost + k * constraint at the
    context point, assembled without solving the variation systems for
    (h, v).
    """
    total = 0.0
    grid = ctx.pair.grid
    h_nodes = h.sample(grid).ravel() if h is not None else None
    for c in range(len(ctx.traces)):
        tb = ctx.table(c)
        if h is not None:
            rot_grad_h = h.gradient(tb.points) @ _ROT.T
            grad_h = h.gradient(tb.points)
            if j is not None and c in ctx.cost_components:
                jv = j.value(tb.points, tb.y)
                tang = np.einsum("ni,ni->n", tb.velocities, rot_grad_h) / tb.speed
                total += float(tb.weights @ (jv * tang))
            total += 2.0 * k * float(
                tb.weights @ (tb.flux * np.einsum("ni,ni->n", tb.grad_y, grad_h))
            )
            m = bundle.orbit_adjoints[c].values
            total += float(tb.weights @ np.einsum("ni,ni->n", m, rot_grad_h))
    vol = np.zeros(grid.nx * grid.ny)
    if v is not None:
        vol += ctx.pair.gplus.ravel() ** 2 * v.values.ravel()
    if h_nodes is not None:
        vol += 2.0 * ctx.pair.gplus.ravel() * ctx.pair.u.values.ravel() * h_nodes
    total += grid.hx * grid.hy * float(bundle.p.values.ravel() @ vol)
    return total


# ---------------------------------------------------------------------------
# multiplier estimation and probe bases


def estimate_multiplier(
    ctx: EvalContext,
    j: CostIntegrand,
    probes: Sequence[tuple[LevelFunction | None, ScalarField | None]],
) -> MultiplierEstimate:
    """Least-squares multiplier from cost/constraint slopes over probes."""
    pairs = derivatives_batch(ctx, j, probes)
    d_cost = np.array([p[0] for p in pairs])
    d_con = np.array([p[1] for p in pairs])
    denom = float(d_con @ d_con)
    scale = 1.0 + float(np.max(np.abs(d_cost))) if d_cost.size else 1.0
    reliable = denom > (1e-12 * scale) ** 2 * max(1, d_con.size)
    k = -float(d_cost @ d_con) / denom if reliable else 0.0
    residual = float(np.linalg.norm(d_cost + k * d_con))
    return MultiplierEstimate(
        multiplier=k,
        residual_norm=residual,
        reliable=reliable,
        records=tuple((float(a), float(b)) for a, b in zip(d_cost, d_con)),
    )


def make_probe_basis(
    g: LevelFunction,
    grid,
    n: int,
    rng: np.random.Generator,
) -> list[tuple[LevelFunction | None, ScalarField | None]]:
    """Deterministic pinned probe directions: bump levels and smooth fields."""
    ext = min(grid.x_max - grid.x_min, grid.y_max - grid.y_min)
    lo_x = grid.x_min + 0.15 * (grid.x_max - grid.x_min)
    hi_x = grid.x_max - 0.15 * (grid.x_max - grid.x_min)
    lo_y = grid.y_min + 0.15 * (grid.y_max - grid.y_min)
    hi_y = grid.y_max - 0.15 * (grid.y_max - grid.y_min)

    def random_level() -> LevelFunction:
        for _ in range(20):
            terms = tuple(
                GaussianBump(
                    (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))),
                    float(rng.uniform(0.2, 0.45) * ext),
                )
                for _ in range(3)
            )
            cand = LevelFunction(terms, rng.uniform(-1.0, 1.0, size=3), pins=g.pins)
            if g.pins:
                cand = project_pinned(cand)
            if np.max(np.abs(cand.coeffs)) > 1e-9:
                return cand
        raise RuntimeError("could not draw a nonzero pinned probe direction")

    def random_field() -> ScalarField:
        centers = rng.uniform([lo_x, lo_y], [hi_x, hi_y], size=(2, 2))
        widths = rng.uniform(0.2, 0.45, size=2) * ext
        amps = rng.uniform(-1.0, 1.0, size=2)

        def fn(pts):
            out = np.zeros(pts.shape[0])
            for ctr, wdt, amp in zip(centers, widths, amps):
                out += amp * np.exp(-0.5 * np.sum((pts - ctr) ** 2, axis=1) / wdt**2)
            return out

        return ScalarField.from_function(grid, fn)

    probes: list[tuple[LevelFunction | None, ScalarField | None]] = []
    for i in range(n):
        mode = i % 3
        if mode == 0:
            probes.append((random_level(), None))
        elif mode == 1:
            probes.append((None, random_field()))
        else:
            probes.append((random_level(), random_field()))
    return probes
