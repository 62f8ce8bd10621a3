"""Dual-weighted residual estimators with partition-of-unity localization.

The primal residual is ``rho(u)(v) = -A(u)(v)`` and the adjoint residual is
``rho*(u, z)(v) = J'(u)(v) - A'(u)(v, z)``.  Given the low-order pair
``(u, z)`` and an enriched pair ``(u2, z2)`` the estimator is

    eta_h = 1/2 rho(u)(z2 - z) + 1/2 rho*(u, z)(u2 - u)

and its nodal contributions replace ``v`` by ``v * chi_i`` for a
partition of unity ``{chi_i}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import (GoalSpec, ProblemDef, Tests, goal_derivative_raw, linearized_raw,
                       residual_raw)
from .fespace import FeFunction, FeSpace, SpaceError
from .mesh import Mesh


def goal_terms(goal) -> list[tuple[float, GoalSpec]]:
    """Normalise a goal argument to a list of ``(coefficient, GoalSpec)``.

    Accepts a single :class:`GoalSpec` or an iterable of pairs, which is
    how a linearised combined functional is passed in.
    """
    if isinstance(goal, GoalSpec):
        return [(1.0, goal)]
    return [(float(c), g) for c, g in goal]


def goal_derivative_tests(goal, u: FeFunction, tests: Tests) -> np.ndarray:
    out = np.zeros(tests.space.n_dofs)
    for c, g in goal_terms(goal):
        if c != 0.0:
            out += c * goal_derivative_raw(g, u, tests)
    return out


@dataclass
class ErrorBreakdown:
    """Estimator parts, nodal PU indicators and element indicators.

    ``nodal`` holds the condensed indicators (hanging-node contributions
    moved to their masters); ``nodal_raw`` keeps one entry per PU node
    including hanging ones.  Remainder terms are not estimated and stay 0.
    """

    eta_p: float
    eta_a: float
    eta_k: float = 0.0
    eta_Iu: float = 0.0
    eta_Iz: float = 0.0
    remainder: float = 0.0
    nodal: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    nodal_raw: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    nodal_p: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    nodal_a: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    element: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def eta_h(self) -> float:
        return self.eta_p + self.eta_a

    @property
    def eta_total(self) -> float:
        return self.eta_h + self.eta_k + self.eta_Iu + self.eta_Iz

    @property
    def indicator_sum(self) -> float:
        return float(np.abs(self.nodal).sum())


def _check_mesh(*funcs: FeFunction) -> Mesh:
    mesh = funcs[0].space.mesh
    for f in funcs[1:]:
        if f.space.mesh is not mesh:
            raise SpaceError("all functions must live on the same mesh")
    return mesh


def nodal_parts(p: ProblemDef, goal, u: FeFunction, z: FeFunction, wz, wu,
                pu: FeSpace, nq: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw nodal values of ``1/2 rho(u)(wz chi_i)`` and ``1/2 rho*(u, z)(wu chi_i)``.

    ``wz`` and ``wu`` are weights in the format accepted by :class:`Tests`.
    """
    tz = Tests(pu, wz)
    tu = Tests(pu, wu)
    if nq is None:
        nq = p.gauss_points(u.space.degree, z.space.degree, max(tz.degree, tu.degree))
    primal = -0.5 * residual_raw(p, u, tz, nq)
    adjoint = 0.5 * (goal_derivative_tests(goal, u, tu) - linearized_raw(p, u, z, tu, nq))
    return primal, adjoint


def _breakdown(pu: FeSpace, primal: np.ndarray, adjoint: np.ndarray, eta_k: float) -> ErrorBreakdown:
    raw = primal + adjoint
    b = ErrorBreakdown(
        eta_p=float(primal.sum()), eta_a=float(adjoint.sum()), eta_k=eta_k,
        nodal=pu.condense(raw), nodal_raw=raw,
        nodal_p=pu.condense(primal), nodal_a=pu.condense(adjoint),
    )
    b.element = localize_to_elements(b, pu.mesh, pu)
    return b


def iteration_error(p: ProblemDef, u: FeFunction, z: FeFunction) -> float:
    """``eta_k = rho(u)(z) = -A(u)(z)`` with the discrete adjoint ``z``."""
    tests = Tests(u.space)
    r = residual_raw(p, u, tests)
    return -float(r @ z.coef)


def estimate_enriched(p: ProblemDef, goal, low: tuple[FeFunction, FeFunction],
                      high: tuple[FeFunction, FeFunction], pu: FeSpace,
                      eta_k: float | None = None, nq: int | None = None) -> ErrorBreakdown:
    """Enriched-space estimator ``eta_h`` with PU localization.

    ``low = (u, z)`` are the discrete primal and adjoint solutions,
    ``high = (u2, z2)`` their enriched counterparts.  ``eta_k`` defaults to
    ``-A(u)(z)``.
    """
    u, z = low
    u2, z2 = high
    mesh = _check_mesh(u, z, u2, z2)
    if pu.mesh is not mesh:
        raise SpaceError("PU space lives on another mesh")
    primal, adjoint = nodal_parts(p, goal, u, z, [(1.0, z2), (-1.0, z)], [(1.0, u2), (-1.0, u)], pu, nq)
    if eta_k is None:
        eta_k = iteration_error(p, u, z)
    return _breakdown(pu, primal, adjoint, eta_k)


def estimate_interpolation(p: ProblemDef, goal, low: tuple[FeFunction, FeFunction],
                           interp: tuple[FeFunction, FeFunction], pu: FeSpace,
                           eta_k: float | None = None, nq: int | None = None) -> ErrorBreakdown:
    """Interpolation-based estimator.

    ``interp = (Iu, Iz)`` are higher-order interpolants of ``u`` and ``z``.
    Besides the localized part the breakdown carries
    ``eta_Iu = -rho(Iu)((Iz + z)/2)`` and
    ``eta_Iz = 1/2 rho*(Iu, Iz)(Iu - u)``.
    """
    u, z = low
    Iu, Iz = interp
    mesh = _check_mesh(u, z, Iu, Iz)
    if pu.mesh is not mesh:
        raise SpaceError("PU space lives on another mesh")
    primal, adjoint = nodal_parts(p, goal, u, z, [(1.0, Iz), (-1.0, z)], [(1.0, Iu), (-1.0, u)], pu, nq)
    if eta_k is None:
        eta_k = iteration_error(p, u, z)
    b = _breakdown(pu, primal, adjoint, eta_k)

    # global (unlocalized) parts: the PU sums to one, so sum the raw vectors
    deg = max(Iu.space.degree, Iz.space.degree)
    nq2 = nq or p.gauss_points(deg, deg, pu.degree + deg)
    t_mid = Tests(pu, [(0.5, Iz), (0.5, z)])
    b.eta_Iu = float(residual_raw(p, Iu, t_mid, nq2).sum())
    t_du = Tests(pu, [(1.0, Iu), (-1.0, u)])
    rho_star = goal_derivative_tests(goal, Iu, t_du) - linearized_raw(p, Iu, Iz, t_du, nq2)
    b.eta_Iz = 0.5 * float(rho_star.sum())
    return b


def direct_eta_h(p: ProblemDef, goal, low, high, nq: int | None = None) -> float:
    """``eta_h`` evaluated without the partition of unity (cross-check)."""
    u, z = low
    u2, z2 = high
    total = 0.0
    for coef, w in ((1.0, z2), (-1.0, z)):
        t = Tests(w.space)
        total += -0.5 * coef * float(residual_raw(p, u, t, nq) @ w.coef)
    for coef, w in ((1.0, u2), (-1.0, u)):
        t = Tests(w.space)
        v = goal_derivative_tests(goal, u, t) - linearized_raw(p, u, z, t, nq)
        total += 0.5 * coef * float(v @ w.coef)
    return total


def localize_to_elements(breakdown: ErrorBreakdown, mesh: Mesh, pu: FeSpace) -> np.ndarray:
    """Distribute ``|nodal|`` equally to the active cells sharing each PU node.

    Hanging-node contributions have already been passed to their masters
    by the constraint weights (1/2 each for Q1 edges) in ``nodal``.
    """
    if pu.mesh is not mesh:
        raise SpaceError("PU space lives on another mesh")
    nodal = np.abs(np.asarray(breakdown.nodal, dtype=float))
    if nodal.shape != (pu.n_dofs,):
        raise SpaceError("nodal indicators do not match the PU space")
    cd = pu.cell_dofs
    count = np.bincount(cd.ravel(), minlength=pu.n_dofs).astype(float)
    share = np.divide(nodal, count, out=np.zeros_like(nodal), where=count > 0)
    # each node appears at most once per cell
    return share[cd].sum(axis=1)
