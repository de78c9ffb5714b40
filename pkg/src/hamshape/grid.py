"""Structured grids, interpolated scalar fields and the fixed-domain elliptic solver.

The hold-all domain is an axis-aligned rectangle carrying a uniform node
grid.  Scalar fields live on the nodes and are evaluated off-grid with
either bilinear or bicubic (Catmull-Rom) interpolation; the bicubic kernel
is C^1, so interpolated values *and* first derivatives are continuous
across cell boundaries.  The elliptic operator is the second-order
five-point discretization of ``-lap(u) + u`` with homogeneous Dirichlet
data on the rectangle boundary, solved by a cached sparse LU
factorization.

The same interpolation weights double as a sparse evaluation operator so
that curve-supported boundary measures can be deposited onto the grid by
the exact transpose, which is what the very weak (transposition) adjoint
solve requires.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverFailure

#: relative residual demanded from every linear solve
SOLVER_TOL = 1e-10

_INTERP_ORDERS = ("bilinear", "bicubic")


@dataclass(frozen=True)
class Grid:
    """Uniform node grid on the rectangle [x_min, x_max] x [y_min, y_max]."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs nx, ny >= 3, got {self.nx} x {self.ny}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid extents must be positive")

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.x_max - self.x_min, self.y_max - self.y_min))

    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs(), self.ys(), indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes as an (nx*ny, 2) array, row-major in (i, j)."""
        X, Y = self.meshgrid()
        return np.column_stack([X.ravel(), Y.ravel()])

    def boundary_mask(self) -> np.ndarray:
        m = np.zeros((self.nx, self.ny), dtype=bool)
        m[0, :] = m[-1, :] = True
        m[:, 0] = m[:, -1] = True
        return m

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return (
            (pts[:, 0] >= self.x_min)
            & (pts[:, 0] <= self.x_max)
            & (pts[:, 1] >= self.y_min)
            & (pts[:, 1] <= self.y_max)
        )


@dataclass(frozen=True)
class ScalarField:
    """Node values on a grid plus an off-grid interpolation rule."""

    grid: Grid
    values: np.ndarray
    interp_order: str = "bicubic"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            vals = vals.reshape(self.grid.shape)
        object.__setattr__(self, "values", vals)
        if self.interp_order not in _INTERP_ORDERS:
            raise ValueError(f"unknown interp_order {self.interp_order!r}")

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable, interp_order: str = "bicubic") -> "ScalarField":
        X, Y = grid.meshgrid()
        pts = np.column_stack([X.ravel(), Y.ravel()])
        vals = np.asarray(fn(pts), dtype=float).reshape(grid.shape)
        return cls(grid, vals, interp_order)

    @classmethod
    def zeros(cls, grid: Grid, interp_order: str = "bicubic") -> "ScalarField":
        return cls(grid, np.zeros(grid.shape), interp_order)

    def eval(self, pts: np.ndarray) -> np.ndarray:
        """Interpolated values at the given (N, 2) points."""
        ix, wx, _ = _axis_stencil(self.grid.x_min, self.grid.hx, self.grid.nx, _col(pts, 0), self.interp_order)
        iy, wy, _ = _axis_stencil(self.grid.y_min, self.grid.hy, self.grid.ny, _col(pts, 1), self.interp_order)
        patch = self.values[ix[:, :, None], iy[:, None, :]]
        return np.einsum("nab,na,nb->n", patch, wx, wy)

    def eval_gradient(self, pts: np.ndarray) -> np.ndarray:
        """Exact gradient of the interpolant at the given points, (N, 2)."""
        ix, wx, dwx = _axis_stencil(self.grid.x_min, self.grid.hx, self.grid.nx, _col(pts, 0), self.interp_order)
        iy, wy, dwy = _axis_stencil(self.grid.y_min, self.grid.hy, self.grid.ny, _col(pts, 1), self.interp_order)
        patch = self.values[ix[:, :, None], iy[:, None, :]]
        gx = np.einsum("nab,na,nb->n", patch, dwx, wy)
        gy = np.einsum("nab,na,nb->n", patch, wx, dwy)
        return np.column_stack([gx, gy])

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return replace(self, values=values)

    def _check_same_grid(self, other: "ScalarField"):
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, ScalarField):
            self._check_same_grid(other)
            return self.with_values(self.values + other.values)
        return self.with_values(self.values + other)

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            self._check_same_grid(other)
            return self.with_values(self.values - other.values)
        return self.with_values(self.values - other)

    def __mul__(self, other):
        if isinstance(other, ScalarField):
            self._check_same_grid(other)
            return self.with_values(self.values * other.values)
        return self.with_values(self.values * other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)


@dataclass(frozen=True)
class CurveSource:
    """Quadrature samples of a boundary measure supported on a traced curve.

    ``kind`` is ``"value"`` when the density pairs with interpolated test
    field values and ``"normal"`` when it pairs with the interpolated
    normal derivative (unit ``normals`` required in that case).
    """

    points: np.ndarray
    weights: np.ndarray
    density: np.ndarray
    kind: str = "value"
    normals: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("value", "normal"):
            raise ValueError(f"unknown CurveSource kind {self.kind!r}")
        if self.kind == "normal" and self.normals is None:
            raise ValueError("normal-kind CurveSource needs unit normals")


# ---------------------------------------------------------------------------
# interpolation stencils


def _col(pts: np.ndarray, k: int) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return pts[:, k]


def _axis_stencil(lo: float, h: float, n: int, x: np.ndarray, order: str):
    """Per-axis stencil indices, weights and weight derivatives (d/dx)."""
    s = (np.asarray(x, dtype=float) - lo) / h
    cell = np.clip(np.floor(s).astype(int), 0, n - 2)
    t = s - cell
    if order == "bilinear":
        idx = np.stack([cell, cell + 1], axis=1)
        w = np.stack([1.0 - t, t], axis=1)
        dw = np.stack([-np.ones_like(t), np.ones_like(t)], axis=1) / h
        return idx, w, dw
    # Catmull-Rom cubic convolution; C^1 kernel, stencil clamped at edges
    idx = np.stack([cell - 1, cell, cell + 1, cell + 2], axis=1)
    idx = np.clip(idx, 0, n - 1)
    t2, t3 = t * t, t * t * t
    w = 0.5 * np.stack(
        [
            -t3 + 2.0 * t2 - t,
            3.0 * t3 - 5.0 * t2 + 2.0,
            -3.0 * t3 + 4.0 * t2 + t,
            t3 - t2,
        ],
        axis=1,
    )
    dw = (
        0.5
        * np.stack(
            [
                -3.0 * t2 + 4.0 * t - 1.0,
                9.0 * t2 - 10.0 * t,
                -9.0 * t2 + 8.0 * t + 1.0,
                3.0 * t2 - 2.0 * t,
            ],
            axis=1,
        )
        / h
    )
    return idx, w, dw


def interpolation_matrix(grid: Grid, pts: np.ndarray, order: str = "bicubic") -> sp.csr_matrix:
    """Sparse operator mapping node values to interpolated values at pts."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    npts = pts.shape[0]
    ix, wx, _ = _axis_stencil(grid.x_min, grid.hx, grid.nx, pts[:, 0], order)
    iy, wy, _ = _axis_stencil(grid.y_min, grid.hy, grid.ny, pts[:, 1], order)
    k = ix.shape[1]
    cols = (ix[:, :, None] * grid.ny + iy[:, None, :]).reshape(npts, -1)
    data = (wx[:, :, None] * wy[:, None, :]).reshape(npts, -1)
    rows = np.repeat(np.arange(npts), k * k)
    mat = sp.csr_matrix((data.ravel(), (rows, cols.ravel())), shape=(npts, grid.nx * grid.ny))
    mat.sum_duplicates()
    return mat


# ---------------------------------------------------------------------------
# discrete differential operators

_DIFF_CACHE: dict[tuple, tuple[sp.csr_matrix, sp.csr_matrix]] = {}


def _diff_1d(n: int, h: float) -> sp.csr_matrix:
    """Central first differences, second-order one-sided rows at the ends."""
    d = sp.lil_matrix((n, n))
    d[0, 0], d[0, 1], d[0, 2] = -1.5, 2.0, -0.5
    d[-1, -1], d[-1, -2], d[-1, -3] = 1.5, -2.0, 0.5
    for off, val in ((1, 0.5), (-1, -0.5)):
        idx = np.arange(1, n - 1)
        d[idx, idx + off] = val
    return sp.csr_matrix(d / h)


def diff_matrices(grid: Grid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse d/dx and d/dy on flattened (row-major) node values."""
    key = (grid, "diff")
    if key not in _DIFF_CACHE:
        dx1 = _diff_1d(grid.nx, grid.hx)
        dy1 = _diff_1d(grid.ny, grid.hy)
        dx = sp.kron(dx1, sp.identity(grid.ny), format="csr")
        dy = sp.kron(sp.identity(grid.nx), dy1, format="csr")
        _DIFF_CACHE[key] = (dx, dy)
    return _DIFF_CACHE[key]


def gradient_field(f: ScalarField) -> tuple[ScalarField, ScalarField]:
    """Discrete gradient: central differences inside, one-sided on the edges."""
    gx = np.gradient(f.values, f.grid.hx, axis=0, edge_order=2)
    gy = np.gradient(f.values, f.grid.hy, axis=1, edge_order=2)
    return f.with_values(gx), f.with_values(gy)


# ---------------------------------------------------------------------------
# Dirichlet solver for -lap(u) + u = f

_FACTOR_CACHE: dict[Grid, spla.SuperLU] = {}


def _interior_operator(grid: Grid) -> sp.csc_matrix:
    nx, ny = grid.nx - 2, grid.ny - 2
    tx = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(nx, nx)) / grid.hx**2
    ty = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(ny, ny)) / grid.hy**2
    lap = sp.kron(tx, sp.identity(ny)) + sp.kron(sp.identity(nx), ty)
    return sp.csc_matrix(lap + sp.identity(nx * ny))


def _factorization(grid: Grid) -> spla.SuperLU:
    if grid not in _FACTOR_CACHE:
        _FACTOR_CACHE[grid] = spla.splu(_interior_operator(grid))
    return _FACTOR_CACHE[grid]


def apply_operator(f: ScalarField) -> np.ndarray:
    """(-lap_h + I) f at interior nodes, shape (nx-2, ny-2)."""
    v = f.values
    g = f.grid
    core = v[1:-1, 1:-1]
    lap = (
        (2.0 * core - v[2:, 1:-1] - v[:-2, 1:-1]) / g.hx**2
        + (2.0 * core - v[1:-1, 2:] - v[1:-1, :-2]) / g.hy**2
    )
    return lap + core


def solve_dirichlet(grid: Grid, rhs: ScalarField) -> ScalarField:
    """Solve -lap(y) + y = rhs in the rectangle with y = 0 on the boundary."""
    if rhs.grid != grid:
        raise ValueError("rhs grid does not match")
    r = rhs.values[1:-1, 1:-1].ravel()
    lu = _factorization(grid)
    y_int = lu.solve(r)
    op = _interior_operator(grid)
    res = np.linalg.norm(op @ y_int - r)
    scale = np.linalg.norm(r)
    if scale > 0 and res / scale > SOLVER_TOL:
        raise SolverFailure("Dirichlet solve residual too large", residual=res / scale)
    out = np.zeros(grid.shape)
    out[1:-1, 1:-1] = y_int.reshape(grid.nx - 2, grid.ny - 2)
    return ScalarField(grid, out, rhs.interp_order)


def solve_adjoint_transposition(
    grid: Grid,
    boundary_sources: Iterable[CurveSource],
    interp_order: str = "bicubic",
) -> ScalarField:
    """Very weak solve: find p pairing curve measures against test fields.

    The returned p satisfies, for every discrete q vanishing on the
    rectangle boundary,

        hx*hy * sum_interior p * (-lap_h q + q)  ==  sum_sources sum_s w_s d_s E_s(q)

    where E_s evaluates q (or its interpolated normal derivative) at the
    curve samples.  Deposits use the exact transposes of the evaluation
    operators, so the identity holds to linear-solver accuracy.
    """
    n_nodes = grid.nx * grid.ny
    r = np.zeros(n_nodes)
    dx, dy = diff_matrices(grid)
    for src in boundary_sources:
        e = interpolation_matrix(grid, src.points, interp_order)
        a = np.asarray(src.weights, dtype=float) * np.asarray(src.density, dtype=float)
        if src.kind == "value":
            r += e.T @ a
        else:
            nrm = np.asarray(src.normals, dtype=float)
            r += dx.T @ (e.T @ (a * nrm[:, 0])) + dy.T @ (e.T @ (a * nrm[:, 1]))
    r_int = r.reshape(grid.shape)[1:-1, 1:-1].ravel() / (grid.hx * grid.hy)
    lu = _factorization(grid)
    p_int = lu.solve(r_int, trans="T")
    op = _interior_operator(grid)
    res = np.linalg.norm(op.T @ p_int - r_int)
    scale = np.linalg.norm(r_int)
    if scale > 0 and res / scale > SOLVER_TOL:
        raise SolverFailure("transposition solve residual too large", residual=res / scale)
    out = np.zeros(grid.shape)
    out[1:-1, 1:-1] = p_int.reshape(grid.nx - 2, grid.ny - 2)
    return ScalarField(grid, out, interp_order)


# ---------------------------------------------------------------------------
# flat CSV serialization

def write_field_csv(field: ScalarField, path) -> None:
    """Header row nx,ny,x_min,x_max,y_min,y_max then i,j,value rows."""
    g = field.grid
    with open(path, "w") as fh:
        fh.write(f"{g.nx},{g.ny},{g.x_min!r},{g.x_max!r},{g.y_min!r},{g.y_max!r}\n")
        for i in range(g.nx):
            for j in range(g.ny):
                fh.write(f"{i},{j},{field.values[i, j]!r}\n")


def read_field_csv(path, interp_order: str = "bicubic") -> ScalarField:
    with open(path) as fh:
        head = fh.readline().strip().split(",")
        nx, ny = int(head[0]), int(head[1])
        x_min, x_max, y_min, y_max = (float(v) for v in head[2:6])
        grid = Grid(x_min, x_max, y_min, y_max, nx, ny)
        vals = np.zeros((nx, ny))
        for line in fh:
            if not line.strip():
                continue
            i_s, j_s, v_s = line.split(",")
            vals[int(i_s), int(j_s)] = float(v_s)
    return ScalarField(grid, vals, interp_order)
