"""Level functions in a smooth closed-form basis, admissibility and census.

A level function is a finite expansion over smooth primitives (monomials up
to degree four, Gaussian bumps, conic quadratics), so its value, gradient
and Hessian are exact at any point of the closed hold-all rectangle: the
orbit tracing and every sensitivity formula differentiate the geometry
through these closed forms, never through grid interpolation.

The negative region of a level function defines the shape; the zero set is
its boundary.  Admissibility asks for strict positivity on the rectangle
boundary, a nonvanishing gradient on the zero set, and (when pinned points
are present) exact zeros there.  The census extracts the connected
component of the negative region anchored at a user point, together with
its holes and one Newton-refined seed per boundary curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import AnchorError, PinProjectionError
from .grid import Grid

NEWTON_TOL = 1e-12
NEWTON_MAXIT = 50
GRAD_MARGIN = 1e-6
PIN_TOL = 1e-8


# ---------------------------------------------------------------------------
# basis primitives


@dataclass(frozen=True)
class Monomial:
    """x^px * y^py with px + py <= 4."""

    px: int
    py: int

    def __post_init__(self):
        if self.px < 0 or self.py < 0 or self.px + self.py > 4:
            raise ValueError("monomial degree must be between 0 and 4")


@dataclass(frozen=True)
class GaussianBump:
    """exp(-|x - center|^2 / (2 width^2))."""

    center: tuple[float, float]
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("gaussian width must be positive")


@dataclass(frozen=True)
class Conic:
    """((x - cx)/rx)^2 + ((y - cy)/ry)^2 - 1; circles have rx == ry."""

    center: tuple[float, float]
    rx: float
    ry: float

    def __post_init__(self):
        if self.rx <= 0 or self.ry <= 0:
            raise ValueError("conic semi-axes must be positive")


BasisTerm = Monomial | GaussianBump | Conic


def _pow(x: np.ndarray, e: np.ndarray) -> np.ndarray:
    """x**e for integer e >= 0, broadcasting (N,1) against (1,M)."""
    return np.power(x[:, None], np.maximum(e[None, :], 0))


def _monomial_tables(terms: list[Monomial], c: np.ndarray, pts: np.ndarray, want: int):
    px = np.array([t.px for t in terms])
    py = np.array([t.py for t in terms])
    x, y = pts[:, 0], pts[:, 1]
    xp, yp = _pow(x, px), _pow(y, py)
    out = [(xp * yp) @ c]
    if want >= 1:
        xp1 = px[None, :] * _pow(x, px - 1)
        yp1 = py[None, :] * _pow(y, py - 1)
        gx = (xp1 * yp) @ c
        gy = (xp * yp1) @ c
        out.append(np.column_stack([gx, gy]))
    if want >= 2:
        xp2 = (px * (px - 1))[None, :] * _pow(x, px - 2)
        yp2 = (py * (py - 1))[None, :] * _pow(y, py - 2)
        hxx = (xp2 * yp) @ c
        hyy = (xp * yp2) @ c
        hxy = (xp1 * yp1) @ c
        out.append(_sym_hess(hxx, hxy, hyy))
    return out


def _gaussian_tables(terms: list[GaussianBump], c: np.ndarray, pts: np.ndarray, want: int):
    centers = np.array([t.center for t in terms])
    w2 = np.array([t.width**2 for t in terms])
    d = pts[:, None, :] - centers[None, :, :]
    r2 = np.sum(d * d, axis=2)
    e = np.exp(-0.5 * r2 / w2[None, :])
    out = [e @ c]
    if want >= 1:
        g = -np.einsum("nm,nmk,m->nk", e, d, c / w2)
        out.append(g)
    if want >= 2:
        outer = np.einsum("nmi,nmj->nmij", d, d)
        h = np.einsum("nm,nmij,m->nij", e, outer, c / w2**2)
        h -= np.einsum("nm,m,ij->nij", e, c / w2, np.eye(2))
        out.append(h)
    return out


def _conic_tables(terms: list[Conic], c: np.ndarray, pts: np.ndarray, want: int):
    centers = np.array([t.center for t in terms])
    inv2 = np.array([[1.0 / t.rx**2, 1.0 / t.ry**2] for t in terms])
    d = pts[:, None, :] - centers[None, :, :]
    vals = np.einsum("nmk,mk->nm", d * d, inv2) - 1.0
    out = [vals @ c]
    if want >= 1:
        g = 2.0 * np.einsum("nmk,mk,m->nk", d, inv2, c)
        out.append(g)
    if want >= 2:
        hxx = np.full(pts.shape[0], 2.0 * np.sum(c * inv2[:, 0]))
        hyy = np.full(pts.shape[0], 2.0 * np.sum(c * inv2[:, 1]))
        out.append(_sym_hess(hxx, np.zeros_like(hxx), hyy))
    return out


def _sym_hess(hxx, hxy, hyy) -> np.ndarray:
    h = np.empty((hxx.shape[0], 2, 2))
    h[:, 0, 0] = hxx
    h[:, 0, 1] = hxy
    h[:, 1, 0] = hxy
    h[:, 1, 1] = hyy
    return h


_KIND_TABLES = {Monomial: _monomial_tables, GaussianBump: _gaussian_tables, Conic: _conic_tables}


# ---------------------------------------------------------------------------
# level function


@dataclass(frozen=True)
class LevelFunction:
    """Closed-form basis expansion with optional pinned zeros."""

    terms: tuple[BasisTerm, ...]
    coeffs: np.ndarray
    pins: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        if coeffs.size != len(self.terms):
            raise ValueError("coefficient count must match basis size")
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "pins", tuple(tuple(map(float, p)) for p in self.pins))

    def _groups(self):
        groups = getattr(self, "_group_cache", None)
        if groups is None:
            by_kind: dict[type, tuple[list, list]] = {}
            for term, c in zip(self.terms, self.coeffs):
                kind = type(term)
                by_kind.setdefault(kind, ([], []))
                by_kind[kind][0].append(term)
                by_kind[kind][1].append(c)
            groups = [(k, ts, np.array(cs)) for k, (ts, cs) in by_kind.items()]
            object.__setattr__(self, "_group_cache", groups)
        return groups

    def _eval(self, pts: np.ndarray, want: int):
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        n = pts.shape[0]
        acc = [np.zeros(n), np.zeros((n, 2)), np.zeros((n, 2, 2))][: want + 1]
        for kind, terms, cs in self._groups():
            parts = _KIND_TABLES[kind](terms, cs, pts, want)
            for a, p in zip(acc, parts):
                a += p
        if single:
            acc = [a[0] for a in acc]
        return acc

    def value(self, pts: np.ndarray) -> np.ndarray:
        return self._eval(pts, 0)[0]

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        return self._eval(pts, 1)[1]

    def hessian(self, pts: np.ndarray) -> np.ndarray:
        return self._eval(pts, 2)[2]

    def sample(self, grid: Grid) -> np.ndarray:
        """Node values, shape (nx, ny)."""
        return self.value(grid.points()).reshape(grid.shape)

    def with_coeffs(self, coeffs: np.ndarray) -> "LevelFunction":
        return replace(self, coeffs=np.asarray(coeffs, dtype=float))

    def add_coeffs(self, delta: np.ndarray) -> "LevelFunction":
        return self.with_coeffs(self.coeffs + np.asarray(delta, dtype=float))

    def with_pins(self, pins: Sequence[Sequence[float]]) -> "LevelFunction":
        return replace(self, pins=tuple(tuple(p) for p in pins))

    def scaled(self, a: float) -> "LevelFunction":
        return self.with_coeffs(a * self.coeffs)

    def perturbed(self, h: "LevelFunction", lam: float) -> "LevelFunction":
        """The level function self + lam*h (bases merged when they differ)."""
        if h.terms == self.terms:
            return self.add_coeffs(lam * h.coeffs)
        return LevelFunction(
            self.terms + h.terms,
            np.concatenate([self.coeffs, lam * h.coeffs]),
            self.pins,
        )


# ---------------------------------------------------------------------------
# admissibility


@dataclass(frozen=True)
class AdmissibilityReport:
    boundary_min: float
    grad_min: float
    pin_values: np.ndarray
    zero_points: np.ndarray
    admissible: bool
    violations: tuple[str, ...]


def newton_project(g: LevelFunction, pts: np.ndarray, tol: float = NEWTON_TOL) -> np.ndarray:
    """Project points onto the zero set by damped-free Newton on g."""
    p = np.atleast_2d(np.asarray(pts, dtype=float)).copy()
    for _ in range(NEWTON_MAXIT):
        f = g.value(p)
        if np.all(np.abs(f) <= tol):
            break
        grad = g.gradient(p)
        n2 = np.sum(grad * grad, axis=1)
        safe = n2 > 1e-30
        step = np.zeros_like(f)
        step[safe] = f[safe] / n2[safe]
        p -= step[:, None] * grad
    return p


def _edge_zero_candidates(vals: np.ndarray, grid: Grid) -> np.ndarray:
    """Seed points on sign-change edges plus exact-zero nodes."""
    xs, ys = grid.xs(), grid.ys()
    pts = []
    sx = vals[:-1, :] * vals[1:, :]
    ii, jj = np.nonzero(sx < 0)
    if ii.size:
        frac = vals[ii, jj] / (vals[ii, jj] - vals[ii + 1, jj])
        pts.append(np.column_stack([xs[ii] + frac * grid.hx, ys[jj]]))
    sy = vals[:, :-1] * vals[:, 1:]
    ii, jj = np.nonzero(sy < 0)
    if ii.size:
        frac = vals[ii, jj] / (vals[ii, jj] - vals[ii, jj + 1])
        pts.append(np.column_stack([xs[ii], ys[jj] + frac * grid.hy]))
    zi, zj = np.nonzero(vals == 0.0)
    if zi.size:
        pts.append(np.column_stack([xs[zi], ys[zj]]))
    if not pts:
        return np.empty((0, 2))
    return np.vstack(pts)


def zero_set_points(g: LevelFunction, grid: Grid) -> np.ndarray:
    """Newton-refined points on the zero set found by a dense sign scan."""
    cands = _edge_zero_candidates(g.sample(grid), grid)
    if cands.size == 0:
        return cands
    refined = newton_project(g, cands)
    inside = grid.contains(refined)
    return refined[inside]


def check_admissible(
    g: LevelFunction,
    grid: Grid,
    grad_margin: float = GRAD_MARGIN,
    pin_tol: float = PIN_TOL,
) -> AdmissibilityReport:
    """Diagnose boundary positivity, gradient margin on the zero set, pins."""
    vals = g.sample(grid)
    bmask = grid.boundary_mask()
    boundary_min = float(vals[bmask].min())
    zpts = zero_set_points(g, grid)
    grad_min = float(np.inf)
    if zpts.size:
        grad_min = float(np.linalg.norm(g.gradient(zpts), axis=1).min())
    pin_values = g.value(np.array(g.pins)) if g.pins else np.empty(0)
    violations = []
    if boundary_min <= 0:
        violations.append("boundary_sign")
    if grad_min <= grad_margin:
        violations.append("zero_gradient_on_level_set")
    if pin_values.size and np.max(np.abs(pin_values)) > pin_tol:
        violations.append("pins")
    return AdmissibilityReport(
        boundary_min=boundary_min,
        grad_min=grad_min,
        pin_values=pin_values,
        zero_points=zpts,
        admissible=not violations,
        violations=tuple(violations),
    )


# ---------------------------------------------------------------------------
# component census


@dataclass(frozen=True)
class ComponentInfo:
    seed: tuple[float, float]
    orientation: int
    encloses: tuple[int, ...] = ()


@dataclass(frozen=True)
class ComponentCensus:
    components: tuple[ComponentInfo, ...]
    holes: int

    @property
    def seeds(self) -> np.ndarray:
        return np.array([c.seed for c in self.components])


def _seed_on_interface(g, grid, neg_mask, other_mask) -> tuple[float, float]:
    """Newton-refined zero between the first adjacent node pair found."""
    xs, ys = grid.xs(), grid.ys()
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        shifted = np.roll(other_mask, (-di, -dj), axis=(0, 1))
        if di == 1:
            shifted[-1, :] = False
        elif di == -1:
            shifted[0, :] = False
        if dj == 1:
            shifted[:, -1] = False
        elif dj == -1:
            shifted[:, 0] = False
        ii, jj = np.nonzero(neg_mask & shifted)
        if ii.size == 0:
            continue
        i, j = int(ii[0]), int(jj[0])
        p0 = np.array([xs[i], ys[j]])
        p1 = np.array([xs[i + di], ys[j + dj]])
        v0, v1 = float(g.value(p0)), float(g.value(p1))
        frac = v0 / (v0 - v1) if v0 != v1 else 0.5
        seed = newton_project(g, p0 + frac * (p1 - p0))[0]
        return (float(seed[0]), float(seed[1]))
    raise AnchorError("no interface edge between component and neighbour region")


def extract_components(g: LevelFunction, grid: Grid, anchor) -> ComponentCensus:
    """Census of the negative component anchored at `anchor` and its holes."""
    anchor = np.asarray(anchor, dtype=float)
    vals = g.sample(grid)
    neg = vals < 0
    if not neg.any():
        raise AnchorError("level function has no negative region")
    labels, _ = ndimage.label(neg)

    X, Y = grid.meshgrid()
    dist2 = (X - anchor[0]) ** 2 + (Y - anchor[1]) ** 2
    dist2 = np.where(neg, dist2, np.inf)
    i0, j0 = np.unravel_index(np.argmin(dist2), dist2.shape)
    near = np.sqrt(dist2[i0, j0])
    if float(g.value(anchor)) > 0 and near > 2.0 * max(grid.hx, grid.hy):
        raise AnchorError("anchor is not in the closure of any negative component")
    comp = labels == labels[i0, j0]

    pos = ~neg
    plabels, _ = ndimage.label(pos)
    ring = np.zeros(grid.shape, dtype=bool)
    ring[0, :] = ring[-1, :] = True
    ring[:, 0] = ring[:, -1] = True
    outside_ids = set(np.unique(plabels[ring & pos])) - {0}
    grown = ndimage.binary_dilation(comp)
    adjacent_ids = set(np.unique(plabels[grown & pos])) - {0}
    hole_ids = sorted(adjacent_ids - outside_ids)

    outer_mask = np.isin(plabels, sorted(outside_ids)) if outside_ids else ~comp
    outer_seed = _seed_on_interface(g, grid, comp, outer_mask)
    infos = [ComponentInfo(outer_seed, orientation=+1, encloses=tuple(range(1, len(hole_ids) + 1)))]
    for hid in hole_ids:
        seed = _seed_on_interface(g, grid, comp, plabels == hid)
        infos.append(ComponentInfo(seed, orientation=-1))
    return ComponentCensus(components=tuple(infos), holes=len(hole_ids))


# ---------------------------------------------------------------------------
# pin projection


def _pin_matrix(terms, pins) -> np.ndarray:
    probe = LevelFunction(terms, np.zeros(len(terms)))
    pts = np.array(pins, dtype=float)
    cols = []
    for i in range(len(terms)):
        e = np.zeros(len(terms))
        e[i] = 1.0
        cols.append(probe.with_coeffs(e).value(pts))
    return np.column_stack(cols)


def project_pinned(g: LevelFunction) -> LevelFunction:
    """Smallest coefficient correction making g vanish at its pins."""
    if not g.pins:
        raise PinProjectionError("level function has no pinned points")
    b = _pin_matrix(g.terms, g.pins)
    r = g.value(np.array(g.pins, dtype=float))
    scale = 1.0 + float(np.max(np.abs(g.coeffs)))
    if np.max(np.abs(r)) <= 1e-15 * scale:
        return g
    delta, _, rank, _ = np.linalg.lstsq(b, -r, rcond=None)
    if rank < len(g.pins):
        raise PinProjectionError("pin constraints are rank deficient for this basis")
    out = g.add_coeffs(delta)
    if np.max(np.abs(out.value(np.array(g.pins)))) > 1e-12 * scale:
        raise PinProjectionError("pin projection did not reach tolerance")
    return out


def pin_nullspace_projector(terms, pins) -> np.ndarray:
    """Matrix projecting coefficient vectors onto directions vanishing at pins."""
    n = len(terms)
    if not pins:
        return np.eye(n)
    b = _pin_matrix(terms, pins)
    return np.eye(n) - np.linalg.pinv(b) @ b
