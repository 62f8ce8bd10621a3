"""Weak forms, Jacobians and goal functionals for the two model problems.

All cells are axis-aligned rectangles, so the reference-to-physical map is
diagonal and gradients are scaled by the cell size.  Volume integrals are
written as ``sum_q w_q |K| (S t + F . grad t)`` for a test family ``t``;
:class:`Tests` contracts such integrands without materialising per-cell
test-function arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fespace import FeFunction, FeSpace, SpaceError, evaluate
from .reference import gauss_1d, gauss_2d, tabulate

CHUNK = 4096
NORMALS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])


# ----------------------------------------------------------------------
# problem definitions

def _nu_arctan(s):
    return 2.0 + np.arctan(s * s)


def _dnu_over_s_arctan(s):
    # nu'(s)/s with nu'(s) = 2 s / (1 + s^4)
    return 2.0 / (1.0 + s**4)


@dataclass(frozen=True)
class ProblemDef:
    """``-div(nu(|grad u|) grad u) = f`` with homogeneous Dirichlet data.

    ``kind`` is ``"poisson"`` (nu = 1) or ``"nonlinear_arctan"``
    (nu(s) = 2 + arctan(s^2)).  ``source`` is a constant or a callable
    ``f(x, y)``.  ``quadrature`` fixes the number of Gauss points per
    direction for every form of the problem; by default it is chosen from
    the polynomial degrees involved.  A fixed rule keeps discrete Galerkin
    orthogonality exact when the integrand is not polynomial.
    """

    kind: str = "poisson"
    source: float | Callable = 1.0
    quadrature: int | None = None

    def __post_init__(self):
        if self.kind not in ("poisson", "nonlinear_arctan"):
            raise ValueError(f"unknown problem kind {self.kind!r}")

    @property
    def linear(self) -> bool:
        return self.kind == "poisson"

    def gauss_points(self, *degrees: int) -> int:
        return self.quadrature or quad_points(*degrees)

    def nu(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "poisson":
            return np.ones_like(s)
        return _nu_arctan(s)

    def dnu(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "poisson":
            return np.zeros_like(s)
        return 2.0 * s / (1.0 + s**4)

    def f(self, x, y):
        if callable(self.source):
            return np.broadcast_to(np.asarray(self.source(x, y), dtype=float), np.shape(x))
        return np.full(np.shape(x), float(self.source))

    def flux(self, grad: np.ndarray) -> np.ndarray:
        if self.kind == "poisson":
            return grad
        s = np.linalg.norm(grad, axis=-1)
        return _nu_arctan(s)[..., None] * grad

    def tangent(self, grad: np.ndarray) -> np.ndarray:
        """d flux / d grad, shape ``grad.shape + (2,)``."""
        eye = np.eye(2)
        if self.kind == "poisson":
            return np.broadcast_to(eye, grad.shape + (2,))
        s = np.linalg.norm(grad, axis=-1)
        out = _nu_arctan(s)[..., None, None] * eye
        out = out + _dnu_over_s_arctan(s)[..., None, None] * grad[..., :, None] * grad[..., None, :]
        return out


# ----------------------------------------------------------------------
# goals

GOAL_KINDS = ("point_value", "flux_on_segment", "l2_norm_squared", "point_velocity_placeholder")


@dataclass(frozen=True)
class GoalSpec:
    """Declarative goal functional.

    ``point`` for point values, ``segment`` (a boundary marker such as
    ``"left"``) for boundary fluxes; ``l2_norm_squared`` integrates over the
    whole domain.
    """

    kind: str
    point: tuple[float, float] | None = None
    segment: str | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in GOAL_KINDS:
            raise ValueError(f"unknown goal kind {self.kind!r}")
        if self.kind == "point_value" and self.point is None:
            raise ValueError("point_value goal needs a point")
        if self.kind == "flux_on_segment" and not self.segment:
            raise ValueError("flux goal needs a boundary segment")

    @property
    def linear(self) -> bool:
        return self.kind != "l2_norm_squared"

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "point_value":
            return f"u({self.point[0]:g},{self.point[1]:g})"
        if self.kind == "flux_on_segment":
            return f"flux[{self.segment}]"
        return "l2sq"


# ----------------------------------------------------------------------
# quadrature and test families

def quad_points(*degrees: int) -> int:
    """Gauss points per direction for an integrand built from the given degrees."""
    kmax = max(degrees)
    return max(kmax + 2, math.ceil((sum(degrees) + 1) / 2) + 1)


class Tests:
    """Test functions ``t_a = weight * phi_a`` for the local basis of ``space``.

    ``weight`` is an :class:`FeFunction` or a list of ``(coefficient,
    FeFunction)`` pairs whose sum forms the weight, so differences of
    functions from different spaces are evaluated exactly.  Without a
    weight the family is the plain local basis.  Results are raw
    vectors over ``space`` DoFs (local basis, not yet condensed).
    """

    __test__ = False  # not a pytest class

    def __init__(self, space: FeSpace, weight=None):
        if isinstance(weight, FeFunction):
            weight = [(1.0, weight)]
        self.space = space
        self.weight = None if weight is None else [(float(a), f) for a, f in weight]
        for _, f in self.weight or ():
            if f.space.mesh is not space.mesh:
                raise SpaceError("weight lives on another mesh")

    @property
    def degree(self) -> int:
        if not self.weight:
            return self.space.degree
        return self.space.degree + max(f.space.degree for _, f in self.weight)

    def _weight_cells(self, pts, cells, size):
        w = 0.0
        gw = 0.0
        for a, f in self.weight:
            fv, fg = f.space.tabulate(pts)
            loc = f.local[cells]
            w = w + a * (loc @ fv.T)
            gw = gw + a * np.einsum("cl,qld->cqd", loc, fg)
        return w, gw / size[:, None, :]

    def _weight_point(self, c, ref, size):
        w = 0.0
        gw = np.zeros(2)
        for a, f in self.weight:
            fv, fg = f.space.tabulate(ref[None, :])
            loc = f.local[c]
            w += a * float(fv[0] @ loc)
            gw += a * (loc @ fg[0])
        return w, gw / size

    def integrate(self, nq: int, S=None, F=None, cells=slice(None)) -> np.ndarray:
        """Local contributions ``int S t_a + F . grad t_a`` on ``cells``.

        ``S`` has shape ``(nc, nq2)`` and ``F`` shape ``(nc, nq2, 2)`` at the
        tensor Gauss points with ``nq`` points per direction.
        """
        pts, wts = gauss_2d(nq)
        mesh = self.space.mesh
        size = mesh.cell_size[cells]
        jac = size[:, 0] * size[:, 1]
        if self.weight is not None:
            w, gw = self._weight_cells(pts, cells, size)
            S_new = np.zeros_like(w) if S is None else S * w
            if F is not None:
                S_new = S_new + np.einsum("cqd,cqd->cq", F, gw)
                F = F * w[:, :, None]
            S = S_new
        v, g = self.space.tabulate(pts)
        n = len(size)
        out = np.zeros((n, self.space.n_local))
        if S is not None:
            out += (S * (wts * jac[:, None])) @ v
        if F is not None:
            Fw = F * (wts[None, :, None] * jac[:, None, None]) / size[:, None, :]
            out += np.einsum("cqd,qld->cl", Fw, g)
        return out

    def at_point(self, c: int, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and physical gradients of all local tests of cell ``c`` at one point."""
        size = self.space.mesh.cell_size[c]
        v, g = self.space.tabulate(ref[None, :])
        v, g = v[0], g[0] / size
        if self.weight is not None:
            w, gw = self._weight_point(c, ref, size)
            g = g * w + v[:, None] * gw[None, :]
            v = v * w
        return v, g

    def scatter(self, local: np.ndarray, cells=slice(None)) -> np.ndarray:
        out = np.zeros(self.space.n_dofs)
        np.add.at(out, self.space.cell_dofs[cells].ravel(), local.ravel())
        return out


def _chunks(n: int):
    for start in range(0, n, CHUNK):
        yield slice(start, min(start + CHUNK, n))


def _field(u: FeFunction, nq: int, cells) -> tuple[np.ndarray, np.ndarray]:
    pts, _ = gauss_2d(nq)
    v, g = u.space.tabulate(pts)
    loc = u.local[cells]
    size = u.space.mesh.cell_size[cells]
    return loc @ v.T, np.einsum("cl,qld->cqd", loc, g) / size[:, None, :]


def _quad_xy(space: FeSpace, nq: int, cells) -> tuple[np.ndarray, np.ndarray]:
    pts, _ = gauss_2d(nq)
    org = space.mesh.cell_origin[cells]
    size = space.mesh.cell_size[cells]
    x = org[:, None, 0] + pts[None, :, 0] * size[:, None, 0]
    y = org[:, None, 1] + pts[None, :, 1] * size[:, None, 1]
    return x, y


# ----------------------------------------------------------------------
# raw forms over a test family

def residual_raw(p: ProblemDef, u: FeFunction, tests: Tests, nq: int | None = None) -> np.ndarray:
    """``A(u)(t_a) = <nu grad u, grad t_a> - <f, t_a>`` for every local test."""
    _same_mesh(u, tests)
    nq = nq or p.gauss_points(u.space.degree, tests.degree)
    out = np.zeros(tests.space.n_dofs)
    for cells in _chunks(u.space.mesh.n_active):
        _, gu = _field(u, nq, cells)
        x, y = _quad_xy(u.space, nq, cells)
        loc = tests.integrate(nq, S=-p.f(x, y), F=p.flux(gu), cells=cells)
        out += tests.scatter(loc, cells)
    return out


def linearized_raw(p: ProblemDef, u: FeFunction, z: FeFunction, tests: Tests,
                   nq: int | None = None) -> np.ndarray:
    """``A'(u)(t_a, z)``; the tangent is symmetric so this is ``<T grad z, grad t_a>``."""
    _same_mesh(u, tests)
    _same_mesh(z, tests)
    nq = nq or p.gauss_points(u.space.degree, z.space.degree, tests.degree)
    out = np.zeros(tests.space.n_dofs)
    for cells in _chunks(u.space.mesh.n_active):
        _, gu = _field(u, nq, cells)
        _, gz = _field(z, nq, cells)
        F = np.einsum("cqij,cqj->cqi", p.tangent(gu), gz)
        out += tests.scatter(tests.integrate(nq, F=F, cells=cells), cells)
    return out


def goal_derivative_raw(g: GoalSpec, u: FeFunction, tests: Tests) -> np.ndarray:
    """``J'(u)(t_a)`` for every local test."""
    _same_mesh(u, tests)
    space = tests.space
    out = np.zeros(space.n_dofs)
    if g.kind == "point_value":
        c, ref = space.locate(g.point)
        v, _ = tests.at_point(c, ref)
        np.add.at(out, space.cell_dofs[c], v)
    elif g.kind == "flux_on_segment":
        nq = quad_points(tests.degree)
        for c, d, ref_pts, wts, length in _segment_edges(space, g.segment, nq):
            normal = NORMALS[d]
            acc = np.zeros(space.n_local)
            for r, w in zip(ref_pts, wts):
                _, grad = tests.at_point(c, r)
                acc += w * length * (grad @ normal)
            np.add.at(out, space.cell_dofs[c], acc)
    elif g.kind == "l2_norm_squared":
        nq = quad_points(u.space.degree, tests.degree)
        for cells in _chunks(space.mesh.n_active):
            uv, _ = _field(u, nq, cells)
            out += tests.scatter(tests.integrate(nq, S=2.0 * uv, cells=cells), cells)
    else:
        raise NotImplementedError("vector-valued goals are not supported")
    return out


def _segment_edges(space: FeSpace, segment: str, nq: int):
    mesh = space.mesh
    t, w = gauss_1d(nq)
    found = False
    for c, d, name in mesh.boundary_edges():
        if name != segment:
            continue
        found = True
        if d in (0, 1):
            ref = np.stack([np.full_like(t, float(d == 1)), t], axis=1)
            length = mesh.cell_size[c, 1]
        else:
            ref = np.stack([t, np.full_like(t, float(d == 3))], axis=1)
            length = mesh.cell_size[c, 0]
        yield c, d, ref, w, length
    if not found:
        raise ValueError(f"no boundary edges carry the marker {segment!r}")


def _same_mesh(u: FeFunction, tests: Tests) -> None:
    if u.space.mesh is not tests.space.mesh:
        raise SpaceError("function and test space live on different meshes")


# ----------------------------------------------------------------------
# public assembly API

@dataclass
class SparseSystem:
    """Reduced system over the free (unconstrained, non-Dirichlet) DoFs."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    space: FeSpace = field(repr=False)

    def expand(self, x_free: np.ndarray) -> FeFunction:
        return FeFunction.from_free(self.space, x_free)


def _conforming(space: FeSpace, raw: np.ndarray) -> np.ndarray:
    vec = space.condense(raw)
    vec[space.dirichlet_dofs] = 0.0
    return vec


def assemble_residual(p: ProblemDef, space: FeSpace, u: FeFunction) -> np.ndarray:
    """Residual ``A(u)(phi_j)`` in the conforming basis; Dirichlet and constrained entries are 0."""
    if u.space is not space:
        raise SpaceError("u does not live on the given space")
    return _conforming(space, residual_raw(p, u, Tests(space)))


def jacobian_matrix(p: ProblemDef, space: FeSpace, u: FeFunction) -> sp.csr_matrix:
    """Full ``n_dofs x n_dofs`` matrix ``A'(u)(phi_j, phi_i)`` over local basis functions."""
    nq = p.gauss_points(space.degree, space.degree)
    pts, wts = gauss_2d(nq)
    v, g = space.tabulate(pts)
    n = space.n_dofs
    nloc = space.n_local
    rows = np.repeat(space.cell_dofs, nloc, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, nloc)).ravel()
    data = np.empty((space.mesh.n_active, nloc, nloc))
    for cells in _chunks(space.mesh.n_active):
        size = space.mesh.cell_size[cells]
        jac = size[:, 0] * size[:, 1]
        # physical gradients G[c, q, l, d], scaled by the quadrature weights
        G = g[None, :, :, :] / size[:, None, None, :]
        Gw = G * (wts[None, :, None, None] * jac[:, None, None, None])
        if not p.linear:
            _, gu = _field(u, nq, cells)
            Gw = np.einsum("cqij,cqlj->cqli", p.tangent(gu), Gw)
        nc = len(jac)
        A = G.transpose(0, 2, 1, 3).reshape(nc, nloc, -1)
        B = Gw.transpose(0, 2, 1, 3).reshape(nc, nloc, -1)
        data[cells] = A @ B.transpose(0, 2, 1)
    return sp.csr_matrix((data.ravel(), (rows, cols)), shape=(n, n))


def assemble_jacobian(p: ProblemDef, space: FeSpace, u: FeFunction,
                      rhs: np.ndarray | None = None) -> SparseSystem:
    """Reduced Jacobian ``P^T K P`` and, optionally, a reduced right-hand side."""
    if u.space is not space:
        raise SpaceError("u does not live on the given space")
    K = jacobian_matrix(p, space, u)
    P = space.prolong
    A = (P.T @ K @ P).tocsr()
    A.sort_indices()
    b = np.zeros(space.n_free) if rhs is None else np.asarray(rhs, dtype=float)[space.free_dofs]
    return SparseSystem(A, b, space)


def goal_eval(g: GoalSpec, u: FeFunction) -> float:
    if g.kind == "point_value":
        return evaluate(u, g.point)
    if g.kind == "flux_on_segment":
        space = u.space
        total = 0.0
        nq = quad_points(space.degree)
        for c, d, ref_pts, wts, length in _segment_edges(space, g.segment, nq):
            _, gr = space.tabulate(ref_pts)
            grads = np.einsum("l,qld->qd", u.local[c], gr) / space.mesh.cell_size[c]
            total += length * float(wts @ (grads @ NORMALS[d]))
        return total
    if g.kind == "l2_norm_squared":
        nq = quad_points(u.space.degree, u.space.degree)
        _, wts = gauss_2d(nq)
        total = 0.0
        for cells in _chunks(u.space.mesh.n_active):
            uv, _ = _field(u, nq, cells)
            total += float(((uv**2) @ wts) @ u.space.mesh.cell_area[cells])
        return total
    raise NotImplementedError("vector-valued goals are not supported")


def goal_derivative(g: GoalSpec, u: FeFunction, space: FeSpace | None = None) -> np.ndarray:
    """``J'(u)(phi_j)`` in the conforming basis of ``space`` (Dirichlet entries kept)."""
    space = space or u.space
    return space.condense(goal_derivative_raw(g, u, Tests(space)))
