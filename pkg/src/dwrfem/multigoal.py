"""Combining several goal functionals into one error functional.

For goals ``J_1..J_N`` and an error-weighting function ``E(x, m)`` the
adjoint right-hand side is the linear functional

    J_c(v) = sum_i sign_i * dE/dx_i(x, m) * J_i(v),   x_i = |J_i(u2) - J_i(u)|

with ``sign_i = sign(J_i(u2) - J_i(u))`` taken from the enriched and the
low-order primal solutions.  Its DWR estimate approximates
``E(|J(u_exact) - J(u)|, m)`` when ``E`` is linear in ``x``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import GoalSpec, goal_derivative, goal_eval
from .fespace import FeFunction, FeSpace

log = logging.getLogger(__name__)

KINDS = ("relative_sum", "absolute_sum", "relative_power", "sqrt_sum")
M_FLOOR = 1e-14


class WeightingError(ValueError):
    pass


@dataclass
class WeightingSpec:
    """Error-weighting function ``E(x, m)``.

    ``relative_sum``: ``sum w_i x_i / |m_i|``; ``absolute_sum``:
    ``sum w_i x_i``; ``relative_power``: ``sum w_i (x_i / |m_i|)^p``;
    ``sqrt_sum``: ``sum w_i sqrt(x_i)``.  ``omega`` are user weights
    (default 1).  When ``m`` is None the caller fills it with ``|J(u)|``.
    """

    kind: str = "relative_sum"
    m: np.ndarray | None = None
    omega: np.ndarray | None = None
    p: float = 2.0
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise WeightingError(f"unknown weighting kind {self.kind!r}")
        if self.kind == "relative_power" and not self.p > 1.0:
            raise WeightingError("relative_power needs p > 1")
        if self.m is not None:
            self.m = np.asarray(self.m, dtype=float)
        if self.omega is not None:
            self.omega = np.asarray(self.omega, dtype=float)

    @property
    def relative(self) -> bool:
        return self.kind in ("relative_sum", "relative_power")

    def _omega(self, n: int) -> np.ndarray:
        return np.ones(n) if self.omega is None else self.omega

    def _absm(self, n: int, guard: bool) -> np.ndarray:
        if self.m is None:
            raise WeightingError("weights m are not set")
        am = np.abs(self.m)
        if am.shape != (n,):
            raise WeightingError("weights m do not match the number of goals")
        if np.any(am == 0.0) and not guard:
            raise WeightingError("zero weight m_i in a relative weighting")
        if np.any(am < M_FLOOR):
            log.warning("weight |m_i| below %.0e floored", M_FLOOR)
            am = np.maximum(am, M_FLOOR)
        return am


def eval_weighting(w: WeightingSpec, x, guard: bool = False) -> float:
    """``E(x, m)`` for a nonnegative error vector ``x``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise WeightingError("E is defined for nonnegative arguments")
    om = w._omega(len(x))
    if w.kind == "absolute_sum":
        return float(om @ x)
    if w.kind == "sqrt_sum":
        return float(om @ np.sqrt(x))
    am = w._absm(len(x), guard)
    if w.kind == "relative_sum":
        return float(om @ (x / am))
    return float(om @ (x / am) ** w.p)


def weighting_gradient(w: WeightingSpec, x, guard: bool = True) -> np.ndarray:
    """``dE/dx_i`` at ``x``; the square root's derivative is floored at ``x_i = 0``."""
    x = np.asarray(x, dtype=float)
    om = w._omega(len(x))
    if w.kind == "absolute_sum":
        return om.copy()
    if w.kind == "sqrt_sum":
        return om * 0.5 / np.sqrt(np.maximum(x, M_FLOOR))
    am = w._absm(len(x), guard)
    if w.kind == "relative_sum":
        return om / am
    return om * w.p * x ** (w.p - 1.0) / am**w.p


def compute_signs(goals: list[GoalSpec], u_enriched: FeFunction, u_low: FeFunction) -> np.ndarray:
    """``sign(J_i(u2) - J_i(u))`` with ties mapped to +1."""
    diff = np.array([goal_eval(g, u_enriched) - goal_eval(g, u_low) for g in goals])
    return np.where(diff < 0.0, -1.0, 1.0)


@dataclass
class CombinedGoal:
    """Goals, weighting and the data fixed before the adjoint solve."""

    goals: list[GoalSpec]
    weighting: WeightingSpec = field(default_factory=WeightingSpec)
    signs: np.ndarray | None = None
    reference: np.ndarray | None = None  # J_i(u2)
    low_values: np.ndarray | None = None  # J_i(u)

    @classmethod
    def prepare(cls, goals, weighting: WeightingSpec, u_enriched: FeFunction,
                u_low: FeFunction) -> "CombinedGoal":
        """Evaluate goals on both solutions, fix signs and (unless frozen) ``m = |J(u)|``."""
        goals = list(goals)
        ref = np.array([goal_eval(g, u_enriched) for g in goals])
        low = np.array([goal_eval(g, u_low) for g in goals])
        if weighting.m is None or not weighting.frozen:
            weighting.m = np.abs(low)
        signs = np.where(ref - low < 0.0, -1.0, 1.0)
        return cls(goals, weighting, signs, ref, low)

    @property
    def x(self) -> np.ndarray:
        return np.abs(self.reference - self.low_values)

    @property
    def coefficients(self) -> np.ndarray:
        """Weights ``w_i`` of the linearized functional ``J_c = sum w_i J_i``."""
        if self.signs is None:
            raise WeightingError("signs must be computed before the adjoint")
        return self.signs * weighting_gradient(self.weighting, self.x)

    def terms(self) -> list[tuple[float, GoalSpec]]:
        return list(zip(self.coefficients.tolist(), self.goals))

    def value(self, u: FeFunction) -> float:
        """``J_c(u)``."""
        return float(sum(c * goal_eval(g, u) for c, g in self.terms()))

    def error_measure(self, errors) -> float:
        """``E(|errors|, m)`` for a vector of signed goal errors."""
        return eval_weighting(self.weighting, np.abs(np.asarray(errors, dtype=float)), guard=True)


def combined_derivative(cg: CombinedGoal, u: FeFunction, space: FeSpace | None = None) -> np.ndarray:
    """Adjoint right-hand side ``sum_i w_i J_i'(u)(phi_j)`` in the conforming basis."""
    space = space or u.space
    out = np.zeros(space.n_dofs)
    for c, g in cg.terms():
        if c != 0.0:
            out += c * goal_derivative(g, u, space)
    return out
