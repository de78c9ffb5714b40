"""Fixed-domain state solves and manufactured control construction.

The state of a shape is computed on the whole rectangle: the control u
acts only through the weight ``max(g, 0)^2``, which vanishes on the shape
and its boundary, so the interior solution is untouched by u while the
exterior extension is steered by it.

Manufactured pairs provide exact ground truth: choose a closed-form state
whose gradient is orthogonal to the level gradient on the zero set (zero
boundary flux), extend it by a C^2 cutoff written as a profile of the
level value (one near the zero set, zero near the rectangle boundary), and
read the control off the extended residual.  Inside a thin level band the
extension equals the state, so no division by the vanishing weight is ever
evaluated there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NeumannCompatibilityError
from .grid import Grid, ScalarField, gradient_field, solve_dirichlet
from .levelset import LevelFunction, zero_set_points

#: width (in level-function units) of the band around the zero set in which
#: the manufactured control is hard-zeroed
CONTROL_BAND = 1e-3


@dataclass(eq=False)
class ControlPair:
    """A level function and control together with the cached state solve."""

    g: LevelFunction
    u: ScalarField
    f: ScalarField
    y: ScalarField
    grad_y: tuple[ScalarField, ScalarField]
    gplus: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.u.grid


def solve_state(g: LevelFunction, u: ScalarField, f: ScalarField) -> ControlPair:
    """State solve with the control switched on outside the shape only."""
    if u.grid != f.grid:
        raise ValueError("control and source grids differ")
    grid = u.grid
    gplus = np.maximum(g.sample(grid), 0.0)
    rhs = f.with_values(f.values + gplus**2 * u.values)
    y = solve_dirichlet(grid, rhs)
    return ControlPair(g=g, u=u, f=f, y=y, grad_y=gradient_field(y), gplus=gplus)


def solve_state_variation(
    pair: ControlPair,
    h: LevelFunction | None,
    v: ScalarField | None,
) -> ScalarField:
    """First-order state response to the direction (h, v)."""
    grid = pair.grid
    rhs = np.zeros(grid.shape)
    if v is not None:
        rhs += pair.gplus**2 * v.values
    if h is not None:
        rhs += 2.0 * pair.gplus * pair.u.values * h.sample(grid)
    return solve_dirichlet(grid, ScalarField(grid, rhs, pair.u.interp_order))


# ---------------------------------------------------------------------------
# manufactured solutions


@dataclass(frozen=True)
class AnalyticState:
    """Closed-form state with the derivatives the pipeline needs."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    laplacian: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray] | None = None


def radial_quartic_state(radius: float, offset: float = 0.0) -> AnalyticState:
    """(|x|^2 - radius^2)^2 + offset; its gradient vanishes on |x| = radius."""
    r2c = radius * radius

    def value(pts):
        pts = np.atleast_2d(pts)
        s = pts[:, 0] ** 2 + pts[:, 1] ** 2 - r2c
        return s * s + offset

    def gradient(pts):
        pts = np.atleast_2d(pts)
        s = pts[:, 0] ** 2 + pts[:, 1] ** 2 - r2c
        return 4.0 * s[:, None] * pts

    def laplacian(pts):
        pts = np.atleast_2d(pts)
        r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        return 8.0 * (r2 - r2c) + 8.0 * r2

    def hessian(pts):
        pts = np.atleast_2d(pts)
        s = pts[:, 0] ** 2 + pts[:, 1] ** 2 - r2c
        h = 8.0 * np.einsum("ni,nj->nij", pts, pts)
        h[:, 0, 0] += 4.0 * s
        h[:, 1, 1] += 4.0 * s
        return h

    return AnalyticState(value, gradient, laplacian, hessian)


def constant_state(c: float) -> AnalyticState:
    def value(pts):
        return np.full(np.atleast_2d(pts).shape[0], float(c))

    def zero_vec(pts):
        return np.zeros((np.atleast_2d(pts).shape[0], 2))

    def zero(pts):
        return np.zeros(np.atleast_2d(pts).shape[0])

    def zero_mat(pts):
        return np.zeros((np.atleast_2d(pts).shape[0], 2, 2))

    return AnalyticState(value, zero_vec, zero, zero_mat)


@dataclass(frozen=True)
class CutoffProfile:
    """C^2 profile of the level value: one below `inner`, zero above `outer`."""

    inner: float
    outer: float

    def __post_init__(self):
        if not (0.0 < self.inner < self.outer):
            raise ValueError("cutoff needs 0 < inner < outer")

    def _t(self, s):
        return np.clip((s - self.inner) / (self.outer - self.inner), 0.0, 1.0)

    def value(self, s):
        t = self._t(np.asarray(s, dtype=float))
        return 1.0 - (6.0 * t**5 - 15.0 * t**4 + 10.0 * t**3)

    def d1(self, s):
        s = np.asarray(s, dtype=float)
        t = self._t(s)
        inside = (s > self.inner) & (s < self.outer)
        return np.where(inside, -(30.0 * t**4 - 60.0 * t**3 + 30.0 * t**2) / (self.outer - self.inner), 0.0)

    def d2(self, s):
        s = np.asarray(s, dtype=float)
        t = self._t(s)
        inside = (s > self.inner) & (s < self.outer)
        return np.where(
            inside,
            -(120.0 * t**3 - 180.0 * t**2 + 60.0 * t) / (self.outer - self.inner) ** 2,
            0.0,
        )


@dataclass(eq=False)
class ManufacturedControl:
    """Control/source pair whose exact state is known in closed form."""

    u: ScalarField
    f: ScalarField
    state: AnalyticState
    cutoff: CutoffProfile
    level: LevelFunction
    neumann_residual: float

    def extended_state(self, pts: np.ndarray) -> np.ndarray:
        """The cutoff-extended state on all of the rectangle."""
        chi = self.cutoff.value(self.level.value(np.atleast_2d(pts)))
        return self.state.value(pts) * chi


def manufacture_control(
    omega_g: LevelFunction,
    grid: Grid,
    analytic_y_inside: AnalyticState,
    cutoff_params: CutoffProfile,
    band: float = CONTROL_BAND,
    flux_tol: float = 1e-8,
) -> ManufacturedControl:
    """Build (u, f) whose state solve reproduces the analytic state inside.

    Raises when the analytic state has nonzero boundary flux on the zero
    set, when the band is wider than the flat part of the cutoff, or when
    the cutoff has not decayed by the rectangle boundary.
    """
    if cutoff_params.inner < band:
        raise ValueError("cutoff inner threshold must cover the control band")
    zpts = zero_set_points(omega_g, grid)
    if zpts.size:
        flux = np.abs(
            np.einsum("ni,ni->n", analytic_y_inside.gradient(zpts), omega_g.gradient(zpts))
        )
        residual = float(flux.max())
        if residual > flux_tol:
            raise NeumannCompatibilityError(
                f"analytic state has boundary flux {residual:.3e} on the zero set"
            )
    else:
        residual = 0.0

    pts = grid.points()
    gv = omega_g.value(pts)
    bmask = grid.boundary_mask().ravel()
    if np.min(gv[bmask]) < cutoff_params.outer:
        raise ValueError("cutoff outer threshold exceeds the level value on the rectangle boundary")

    grad_g = omega_g.gradient(pts)
    lap_g = np.trace(omega_g.hessian(pts), axis1=1, axis2=2)
    yv = analytic_y_inside.value(pts)
    gy = analytic_y_inside.gradient(pts)
    f_vals = -analytic_y_inside.laplacian(pts) + yv

    chi = cutoff_params.value(gv)
    d1 = cutoff_params.d1(gv)
    d2 = cutoff_params.d2(gv)
    grad_g_sq = np.einsum("ni,ni->n", grad_g, grad_g)
    dot_yg = np.einsum("ni,ni->n", gy, grad_g)
    # -lap(y*chi) + y*chi with chi = profile(g), all in closed form
    rhs_ext = chi * f_vals - 2.0 * d1 * dot_yg - yv * (d2 * grad_g_sq + d1 * lap_g)

    gplus_sq = np.maximum(gv, 0.0) ** 2
    u_vals = np.zeros_like(gv)
    outside = gv > band
    u_vals[outside] = (rhs_ext[outside] - f_vals[outside]) / gplus_sq[outside]

    u = ScalarField(grid, u_vals.reshape(grid.shape))
    f = ScalarField(grid, f_vals.reshape(grid.shape))
    return ManufacturedControl(
        u=u,
        f=f,
        state=analytic_y_inside,
        cutoff=cutoff_params,
        level=omega_g,
        neumann_residual=residual,
    )
