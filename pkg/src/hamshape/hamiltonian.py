"""Periodic orbit tracing of level-set boundaries and their sensitivities.

Boundary curves are traced as orbits of the rotated-gradient field

    x1' = -dg/dy(x),   x2' = +dg/dx(x),

the sign convention under which the level value g(x(t)) is conserved and
the speed equals ``|grad g|`` along the orbit (counterclockwise around
minima of g).  For an admissible level function every such orbit is a
closed curve; the period is detected by the first genuine return through
the plane normal to the launch velocity and refined by bisection on the
dense output.

First-order sensitivity of an orbit to a perturbation ``g -> g + lam*h``
solves the linear variation system

    w' = M(t) w + b(t),  M = J Hess(g)(z(t)),  b = J grad(h)(z(t)),  w(0) = 0

with J the quarter-turn rotation.  The period sensitivity follows from the
endpoint value of w divided by the larger endpoint velocity component; the
two algebraically equivalent branches are selected for robustness.
Variation (and later adjoint) systems are linear with smooth coefficients
along a known orbit, so they are integrated by a fixed-step fourth-order
Runge-Kutta scheme on a fine uniform subdivision of the period; the
coefficient tables are precomputed vectorized, and many right-hand sides
are propagated in one batched sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DegenerateTraceError, TraceError
from .levelset import LevelFunction

TOL_PERIOD = 1e-8
ODE_RTOL = 1e-10
ODE_ATOL = 1e-12
N_SAMPLES = 512
#: minimum fixed RK4 steps across one period for the linear solves
MIN_FINE_STEPS = 2048

_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def hamiltonian_field(g: LevelFunction, pts: np.ndarray) -> np.ndarray:
    """Rotated gradient (-dg/dy, +dg/dx) at the given points."""
    grad = g.gradient(pts)
    return grad @ _ROT.T if grad.ndim == 2 else _ROT @ grad


class _PiecewiseDense:
    """Dense output stitched from consecutive integrator runs."""

    def __init__(self, sols):
        self._sols = [s.sol for s in sols]
        self._ends = np.array([s.t[-1] for s in sols])
        self._t0 = sols[0].t[0]

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        t_arr = np.clip(t_arr, self._t0, self._ends[-1])
        idx = np.searchsorted(self._ends, t_arr, side="left")
        idx = np.minimum(idx, len(self._sols) - 1)
        out = np.empty((3, t_arr.size))
        for k in np.unique(idx):
            sel = idx == k
            out[:, sel] = self._sols[k](t_arr[sel])
        if np.isscalar(t) or np.ndim(t) == 0:
            return out[:, 0]
        return out


@dataclass(eq=False)
class BoundaryTrace:
    """One periodic orbit: uniform samples, period, and dense output."""

    seed: np.ndarray
    times: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    period: float
    component_id: int = 0
    dense: _PiecewiseDense | None = field(default=None, repr=False)

    def point_at(self, t) -> np.ndarray:
        if self.dense is None:
            raise TraceError("trace has no dense output (deserialized?)")
        out = self.dense(t)
        return out[:2] if out.ndim == 1 else out[:2].T

    @property
    def n_samples(self) -> int:
        return self.times.size - 1


def trace_orbit(
    g: LevelFunction,
    seed,
    n_samples: int = N_SAMPLES,
    component_id: int = 0,
    l_max: float | None = None,
    rtol: float = ODE_RTOL,
    atol: float = ODE_ATOL,
) -> BoundaryTrace:
    """Trace the closed orbit through `seed` and detect its period."""
    if n_samples % 2 != 0:
        raise ValueError("n_samples must be even (composite Simpson rule)")
    seed = np.asarray(seed, dtype=float)
    g0 = float(g.value(seed))
    if abs(g0) > 1e-10 * (1.0 + float(np.max(np.abs(g.coeffs)))):
        raise TraceError(f"seed is not on the zero set (g(seed) = {g0:.3e})")
    v0 = hamiltonian_field(g, seed)
    speed0 = float(np.linalg.norm(v0))
    if speed0 < 1e-12:
        raise TraceError("seed velocity vanishes (critical point on the zero set)")
    vhat = v0 / speed0
    scale = 1.0 + float(np.linalg.norm(seed))
    if l_max is None:
        l_max = 100.0 * 8.0 * scale

    def rhs(t, s):
        v = hamiltonian_field(g, s[:2])
        return (v[0], v[1], float(np.hypot(v[0], v[1])))

    def section(x):
        return (x[0] - seed[0]) * vhat[0] + (x[1] - seed[1]) * vhat[1]

    chunk = 8.0 * scale / speed0
    t0, state = 0.0, np.array([seed[0], seed[1], 0.0])
    pieces = []
    reach = 0.0
    period = None
    for _ in range(200):
        sol = solve_ivp(rhs, (t0, t0 + chunk), state, dense_output=True, rtol=rtol, atol=atol)
        if sol.status == -1:
            raise TraceError(f"integrator failed while tracing: {sol.message}")
        pieces.append(sol)
        reach = max(reach, float(np.max(np.linalg.norm(sol.y[:2].T - seed, axis=1))))
        prox = 1e-3 * (scale + reach)
        # candidate returns: strict sign change of the section on a refined grid
        ts = np.sort(np.concatenate([sol.t, 0.5 * (sol.t[:-1] + sol.t[1:])]))
        zs = sol.sol(ts)
        svals = (zs[0] - seed[0]) * vhat[0] + (zs[1] - seed[1]) * vhat[1]
        cross = np.nonzero((svals[:-1] < 0.0) & (svals[1:] >= 0.0))[0]
        for k in cross:
            lo, hi = ts[k], ts[k + 1]
            for _ in range(90):
                mid = 0.5 * (lo + hi)
                if section(sol.sol(mid)[:2]) < 0.0:
                    lo = mid
                else:
                    hi = mid
            t_c = 0.5 * (lo + hi)
            x_c = sol.sol(t_c)[:2]
            if np.linalg.norm(x_c - seed) <= prox:
                period = t_c
                break
        if period is not None:
            break
        if sol.y[2, -1] > l_max:
            raise TraceError("arc length bound exceeded without orbit closure")
        t0 = sol.t[-1]
        state = sol.y[:, -1]
    if period is None:
        raise TraceError("no orbit return detected")

    dense = _PiecewiseDense(pieces)
    end = dense(period)[:2]
    if np.linalg.norm(end - seed) > TOL_PERIOD * scale:
        raise TraceError(
            f"orbit return misses the seed by {np.linalg.norm(end - seed):.3e}"
        )
    times = np.linspace(0.0, period, n_samples + 1)
    pts = dense(times)[:2].T
    vel = hamiltonian_field(g, pts)
    return BoundaryTrace(
        seed=seed,
        times=times,
        points=pts,
        velocities=vel,
        period=float(period),
        component_id=component_id,
        dense=dense,
    )


# ---------------------------------------------------------------------------
# coefficient tables and batched linear solves along an orbit


class OrbitTable:
    """Fine uniform subdivision of one period with vectorized coefficients.

    The table carries orbit positions, the variation-system matrix
    ``M = J Hess(g)`` and auxiliary geometry at ``2K+1`` half-step nodes,
    sized so that classical RK4 with K steps stays below the adaptive
    integrator tolerances and so that the coarse sample times are an exact
    subset of the step times.
    """

    def __init__(self, g: LevelFunction, trace: BoundaryTrace, min_steps: int = MIN_FINE_STEPS):
        n = trace.n_samples
        mult = max(4, int(np.ceil(min_steps / n)))
        self.n_steps = mult * n
        self.stride = 2 * mult
        self.times = np.linspace(0.0, trace.period, 2 * self.n_steps + 1)
        self.dt = trace.period / self.n_steps
        self.z = trace.point_at(self.times)
        self.grad_g = g.gradient(self.z)
        self.hess_g = g.hessian(self.z)
        self.matrix = np.einsum("ij,njk->nik", _ROT, self.hess_g)
        self.velocity = self.grad_g @ _ROT.T
        self.speed = np.linalg.norm(self.velocity, axis=1)


def orbit_table(g: LevelFunction, trace: BoundaryTrace) -> OrbitTable:
    cache = getattr(trace, "_table_cache", None)
    key = id(g)
    if cache is None:
        cache = {}
        trace._table_cache = cache
    if key not in cache:
        cache[key] = OrbitTable(g, trace)
    return cache[key]


def rk4_linear(matrix: np.ndarray, forcing: np.ndarray, dt: float, w0: np.ndarray) -> np.ndarray:
    """Propagate w' = M(t) w + F(t) for a batch of forcings.

    matrix: (2K+1, 2, 2) at half-step nodes; forcing: (2K+1, d, 2);
    w0: (d, 2).  Returns (K+1, d, 2) at the step nodes.
    """
    n2 = matrix.shape[0]
    n_steps = (n2 - 1) // 2
    d = forcing.shape[1]
    out = np.empty((n_steps + 1, d, 2))
    w = w0.copy()
    out[0] = w
    mt = np.swapaxes(matrix, 1, 2)
    for k in range(n_steps):
        a, m, b = 2 * k, 2 * k + 1, 2 * k + 2
        k1 = w @ mt[a] + forcing[a]
        k2 = (w + 0.5 * dt * k1) @ mt[m] + forcing[m]
        k3 = (w + 0.5 * dt * k2) @ mt[m] + forcing[m]
        k4 = (w + dt * k3) @ mt[b] + forcing[b]
        w = w + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = w
    return out


@dataclass(eq=False)
class OrbitVariation:
    """Solution of the variation system along one orbit plus the period slope."""

    trace: BoundaryTrace
    values: np.ndarray
    period_derivative: float


def _theta_from(w_end: np.ndarray, v_end: np.ndarray) -> float:
    """Period slope from endpoint variation and velocity, robust branch."""
    if max(abs(v_end[0]), abs(v_end[1])) < 1e-12:
        raise DegenerateTraceError("endpoint velocity vanishes; trace is corrupted")
    if abs(v_end[1]) >= abs(v_end[0]):
        return float(-w_end[1] / v_end[1])
    return float(-w_end[0] / v_end[0])


def _check_shared_pins(g: LevelFunction, h: LevelFunction):
    if not g.pins:
        return
    pins = np.array(g.pins)
    vals = h.value(pins)
    scale = 1.0 + float(np.max(np.abs(h.coeffs))) if h.coeffs.size else 1.0
    if np.max(np.abs(vals)) > 1e-8 * scale:
        raise ValueError("perturbation direction does not vanish at the pinned points")


def solve_variations_batch(
    g: LevelFunction, hs: Sequence[LevelFunction], trace: BoundaryTrace
) -> list[OrbitVariation]:
    """Variation solutions for several directions sharing one orbit."""
    table = orbit_table(g, trace)
    d = len(hs)
    forcing = np.empty((table.times.size, d, 2))
    for i, h in enumerate(hs):
        _check_shared_pins(g, h)
        forcing[:, i, :] = h.gradient(table.z) @ _ROT.T
    w_all = rk4_linear(table.matrix, forcing, table.dt, np.zeros((d, 2)))
    sub = w_all[:: table.stride // 2]
    results = []
    for i in range(d):
        theta = _theta_from(w_all[-1, i, :], table.velocity[-1])
        results.append(OrbitVariation(trace, sub[:, i, :], theta))
    return results


def solve_variations(g: LevelFunction, h: LevelFunction, trace: BoundaryTrace) -> OrbitVariation:
    """Sensitivity of the orbit to the direction h, with w(0) = 0."""
    return solve_variations_batch(g, [h], trace)[0]


def period_derivative(
    g: LevelFunction, h: LevelFunction, trace: BoundaryTrace, variation: OrbitVariation
) -> float:
    """Directional derivative of the period from the endpoint variation."""
    return _theta_from(variation.values[-1], variation.trace.velocities[-1])


# ---------------------------------------------------------------------------
# serialization


def write_trace_csv(trace: BoundaryTrace, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# seed={trace.seed[0]!r},{trace.seed[1]!r}\n")
        fh.write(f"# period={trace.period!r}\n")
        fh.write(f"# component={trace.component_id}\n")
        fh.write("t,z1,z2,z1p,z2p\n")
        for t, p, v in zip(trace.times, trace.points, trace.velocities):
            fh.write(f"{t!r},{p[0]!r},{p[1]!r},{v[0]!r},{v[1]!r}\n")


def read_trace_csv(path) -> BoundaryTrace:
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, val = line[1:].split("=", 1)
                meta[key.strip()] = val.strip()
            elif not line.startswith("t,"):
                rows.append([float(v) for v in line.split(",")])
    data = np.array(rows)
    seed = np.array([float(v) for v in meta["seed"].split(",")])
    return BoundaryTrace(
        seed=seed,
        times=data[:, 0],
        points=data[:, 1:3],
        velocities=data[:, 3:5],
        period=float(meta["period"]),
        component_id=int(meta["component"]),
        dense=None,
    )
