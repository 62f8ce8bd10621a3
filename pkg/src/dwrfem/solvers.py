"""Sparse linear solves and a Newton iteration with goal-oriented stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import ProblemDef, SparseSystem, assemble_jacobian, assemble_residual
from .fespace import FeFunction, FeSpace, SpaceError

log = logging.getLogger(__name__)


class LinearSolveError(RuntimeError):
    """Factorization failed (singular or numerically degenerate matrix)."""


class NonConvergenceError(RuntimeError):
    """Newton did not reach its stopping criterion; carries the report."""

    def __init__(self, msg: str, report: "NewtonReport"):
        super().__init__(msg)
        self.report = report


def solve_sparse(system: SparseSystem | sp.spmatrix, rhs: np.ndarray | None = None,
                 method: str = "direct", rtol: float = 1e-12) -> np.ndarray:
    """Solve the reduced system.

    ``method="direct"`` uses SuperLU with a minimum-degree ordering of
    ``A^T + A`` (the matrices are symmetric or nearly so) followed by a
    refinement sweep if the relative residual exceeds ``rtol``.
    ``method="cg"`` runs Jacobi-preconditioned CG (SPD matrices only).
    """
    if isinstance(system, SparseSystem):
        A, b = system.matrix, system.rhs if rhs is None else rhs
    else:
        A, b = system, rhs
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise LinearSolveError(f"shape mismatch {A.shape} vs {b.shape}")
    if A.shape[0] == 0:
        return np.zeros(0)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if method == "cg":
        d = A.diagonal()
        if np.any(d <= 0):
            raise LinearSolveError("CG path needs a positive diagonal")
        M = sp.diags(1.0 / d)
        x, info = spla.cg(A, b, rtol=rtol, atol=0.0, M=M, maxiter=10 * A.shape[0])
        if info != 0:
            raise LinearSolveError(f"CG did not converge (info={info})")
        return x
    if method != "direct":
        raise ValueError(f"unknown method {method!r}")
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise LinearSolveError(str(exc)) from exc
    x = lu.solve(b)
    for _ in range(2):
        r = b - A @ x
        if np.linalg.norm(r) <= rtol * bnorm:
            break
        x = x + lu.solve(r)
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("non-finite solution")
    return x


def solve_adjoint(p: ProblemDef, space: FeSpace, u: FeFunction, rhs: np.ndarray) -> FeFunction:
    """Solve ``A'(u)(phi, z) = rhs(phi)`` for ``z`` in ``space`` (homogeneous Dirichlet)."""
    system = assemble_jacobian(p, space, u, rhs)
    # the adjoint uses the transposed Jacobian
    z = solve_sparse(system.matrix.T, system.rhs)
    return FeFunction.from_free(space, z)


@dataclass
class StoppingRule:
    """Newton stopping rule.

    ``mode="residual"`` stops once the Euclidean norm of the reduced residual
    drops below ``atol``.  ``mode="balance"`` stops as soon as the iteration
    error estimate ``|J'(u)(du)|`` is at most ``balance_fraction * |eta_h|``;
    ``goal_derivative(u)`` must return the conforming vector ``J'(u)(phi_j)``
    and ``eta_h`` is a number or a callable ``eta_h(u)``.  The residual rule
    is always honoured as a fallback.
    """

    atol: float = 1e-10
    mode: str = "residual"
    balance_fraction: float = 0.1
    eta_h: float | Callable[[FeFunction], float] | None = None
    goal_derivative: Callable[[FeFunction], np.ndarray] | None = None
    max_iters: int = 30
    damping: bool = True
    max_halvings: int = 12

    def __post_init__(self):
        if self.mode not in ("residual", "balance"):
            raise ValueError(f"unknown stopping mode {self.mode!r}")
        if self.mode == "balance" and (self.eta_h is None or self.goal_derivative is None):
            raise ValueError("balancing rule needs eta_h and goal_derivative")


@dataclass
class NewtonReport:
    iterations: int = 0
    residual_norm: float = np.inf
    residual_history: list[float] = field(default_factory=list)
    delta: FeFunction | None = None
    eta_k_history: list[float] = field(default_factory=list)
    converged: bool = False
    damped: bool = False
    stopped_by: str = ""


def eta_k_via_update(space: FeSpace, goal_deriv: np.ndarray, delta_u: FeFunction) -> float:
    """Iteration-error estimate ``J'(u)(du)`` from the Newton update ``du``."""
    if delta_u.space is not space:
        raise SpaceError("update does not live on the given space")
    free = space.free_dofs
    return float(np.dot(np.asarray(goal_deriv)[free], delta_u.coef[free]))


def eta_k_direct(p: ProblemDef, u: FeFunction, z: FeFunction) -> float:
    """``rho(u)(z) = -A(u)(z)`` evaluated with the discrete adjoint ``z``."""
    r = assemble_residual(p, u.space, u)
    free = u.space.free_dofs
    return -float(np.dot(r[free], z.coef[free]))


def newton_solve(p: ProblemDef, space: FeSpace, u0: FeFunction | None = None,
                 stopping: StoppingRule | None = None,
                 callback: Callable[[FeFunction, FeFunction], None] | None = None,
                 ) -> tuple[FeFunction, NewtonReport]:
    """Newton iteration for ``A(u)(v) = 0`` on ``space``.

    A halving damping activates only when a full step increases the
    residual norm.  ``callback(u, du)`` is called with every iterate and
    its Newton update.  Raises :class:`NonConvergenceError` after
    ``max_iters``.
    """
    rule = stopping or StoppingRule()
    u = FeFunction.zeros(space) if u0 is None else u0.distribute()
    if u.space is not space:
        raise SpaceError("initial guess does not live on the given space")
    free = space.free_dofs
    rep = NewtonReport()
    r = assemble_residual(p, space, u)
    rnorm = float(np.linalg.norm(r[free]))
    rep.residual_history.append(rnorm)
    rep.residual_norm = rnorm

    for it in range(rule.max_iters + 1):
        if rnorm <= rule.atol:
            rep.converged, rep.stopped_by = True, "residual"
            break
        if it == rule.max_iters:
            break
        system = assemble_jacobian(p, space, u, -r)
        du = FeFunction.from_free(space, solve_sparse(system))
        rep.delta = du
        if callback is not None:
            callback(u, du)
        if rule.mode == "balance":
            eta_k = eta_k_via_update(space, rule.goal_derivative(u), du)
            rep.eta_k_history.append(eta_k)
            eta_h = rule.eta_h(u) if callable(rule.eta_h) else rule.eta_h
            if abs(eta_k) <= rule.balance_fraction * abs(eta_h):
                rep.converged, rep.stopped_by = True, "balance"
                break
        step = 1.0
        trial = u + du
        r_new = assemble_residual(p, space, trial)
        rnew = float(np.linalg.norm(r_new[free]))
        if rule.damping and not p.linear:
            halvings = 0
            while rnew > rnorm and halvings < rule.max_halvings:
                step *= 0.5
                halvings += 1
                trial = u + du * step
                r_new = assemble_residual(p, space, trial)
                rnew = float(np.linalg.norm(r_new[free]))
            rep.damped |= halvings > 0
        u, r, rnorm = trial, r_new, rnew
        rep.iterations += 1
        rep.residual_history.append(rnorm)
        rep.residual_norm = rnorm
        log.debug("newton %d: |r| = %.3e (step %.3g)", rep.iterations, rnorm, step)

    if not rep.converged:
        raise NonConvergenceError(
            f"Newton did not converge in {rule.max_iters} iterations (|r| = {rnorm:.3e})", rep)
    return u, rep
