"""Marking, the adaptive loops and quality metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .assembly import GoalSpec, ProblemDef, goal_derivative, goal_eval, quad_points
from .dwr import ErrorBreakdown, estimate_enriched, estimate_interpolation
from .fespace import (FeFunction, FeSpace, PatchStructureError, interpolate_patch, prolongate,
                      pu_basis)
from .mesh import DomainSpec, Mesh, build_grid, refine, refine_uniform
from .multigoal import CombinedGoal, WeightingSpec, combined_derivative
from .solvers import StoppingRule, newton_solve, solve_adjoint

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# marking

def doerfler_mark(indicators, theta: float = 0.5) -> list[int]:
    """Minimal set of indices whose indicators sum to at least ``theta`` of the total.

    Greedy by descending value; ties are broken by ascending index.  Returns
    an empty list when all indicators vanish.
    """
    eta = np.asarray(indicators, dtype=float)
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    if np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise ValueError("indicators must be finite and nonnegative")
    total = eta.sum()
    if total <= 0.0:
        return []
    order = np.lexsort((np.arange(len(eta)), -eta))
    csum = np.cumsum(eta[order])
    goal = theta * total
    # guard the comparison against rounding in the cumulative sum
    n = int(np.searchsorted(csum, goal * (1.0 - 1e-14), side="left")) + 1
    n = min(n, int(np.count_nonzero(eta)))
    return sorted(order[:n].tolist())


# ----------------------------------------------------------------------
# configuration and records

@dataclass
class LoopConfig:
    """Settings of one adaptive (or uniform) run."""

    domain: DomainSpec = field(default_factory=lambda: DomainSpec((0.0, 0.0, 1.0, 1.0), 2, 2))
    initial_refinements: int = 0
    primal_degree: int = 1
    enriched_degree: int = 2
    pu_degree: int = 1
    estimator: str = "enriched"
    theta: float = 0.5
    tol: float = 1e-8
    max_dofs: int = 20000
    max_steps: int = 50
    uniform: bool = False
    estimate: bool = True
    newton: StoppingRule = field(default_factory=StoppingRule)
    warm_start: bool = True

    def __post_init__(self):
        if self.estimator not in ("enriched", "interpolation"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.primal_degree < 1 or self.enriched_degree < 1:
            raise ValueError("degrees must be positive")

    def initial_mesh(self) -> Mesh:
        return refine_uniform(build_grid(self.domain), self.initial_refinements)

    def fixed_rule(self, p: ProblemDef) -> ProblemDef:
        """``p`` with one quadrature rule shared by all solves and estimates.

        The rule integrates the bilinear forms of the highest degree exactly,
        so the enriched solution satisfies the same discrete equations that
        the estimator evaluates.  An explicit ``p.quadrature`` is kept.
        """
        if p.quadrature is not None:
            return p
        k = max(self.primal_degree, self.enriched_degree)
        return replace(p, quadrature=quad_points(k, k))


@dataclass
class MetricsRecord:
    step: int
    dofs: int
    cells: int
    exact_error: float
    eta_h: float
    eta_p: float
    eta_a: float
    eta_k: float
    eta_total: float
    indicator_sum: float
    I_eff: float
    I_eff_plus: float
    I_eff_p: float
    I_eff_a: float
    I_ind: float
    goal_value: float = math.nan
    goal_errors: list[float] = field(default_factory=list)
    newton_iterations: int = 0
    estimator: str = "enriched"
    marked: int = 0


def _ratio(a: float, b: float) -> float:
    if b == 0.0 or not math.isfinite(b):
        return math.nan
    return a / b


def metrics(step: int, dofs: int, cells: int, b: ErrorBreakdown | None,
            exact_error: float = math.nan, **extra) -> MetricsRecord:
    """Effectivity and indicator indices; undefined ratios are NaN."""
    if b is None:
        vals = dict(eta_h=math.nan, eta_p=math.nan, eta_a=math.nan, eta_k=math.nan,
                    eta_total=math.nan, indicator_sum=math.nan)
    else:
        vals = dict(eta_h=b.eta_h, eta_p=b.eta_p, eta_a=b.eta_a, eta_k=b.eta_k,
                    eta_total=b.eta_total, indicator_sum=b.indicator_sum)
    e = exact_error
    return MetricsRecord(
        step=step, dofs=dofs, cells=cells, exact_error=e, **vals,
        I_eff=_ratio(vals["eta_h"], e), I_eff_plus=_ratio(vals["eta_total"], e),
        I_eff_p=_ratio(vals["eta_p"], e), I_eff_a=_ratio(vals["eta_a"], e),
        I_ind=_ratio(vals["indicator_sum"], abs(e)), **extra)


# ----------------------------------------------------------------------
# the loops

@dataclass
class StepState:
    """Everything computed on one mesh; handed to the ``on_step`` hook."""

    step: int
    mesh: Mesh
    u: FeFunction
    z: FeFunction | None
    breakdown: ErrorBreakdown | None
    record: MetricsRecord


def _solve_primal(p, space, cfg, previous, stopping=None, callback=None):
    u0 = None
    if cfg.warm_start and previous is not None and not p.linear:
        u0 = prolongate(previous, space) if previous.space.mesh is not space.mesh else previous
    return newton_solve(p, space, u0, stopping or cfg.newton, callback=callback)


def _should_stop(cfg: LoopConfig, rec: MetricsRecord, mesh: Mesh) -> bool:
    if rec.dofs > cfg.max_dofs or rec.step + 1 >= cfg.max_steps:
        return True
    if cfg.estimate and math.isfinite(rec.eta_h) and abs(rec.eta_h) <= 1e-2 * cfg.tol:
        return True
    return False


def _next_mesh(cfg: LoopConfig, mesh: Mesh, b: ErrorBreakdown | None) -> tuple[Mesh | None, int]:
    if cfg.uniform:
        return refine(mesh, mesh.active), mesh.n_active
    marked = doerfler_mark(b.element, cfg.theta)
    if not marked:
        return None, 0
    return refine(mesh, mesh.active[marked]), len(marked)


def _estimate(p, goal, cfg, mesh, u, z, u2, z2, V):
    pu = pu_basis(mesh, cfg.pu_degree)
    if cfg.estimator == "interpolation":
        try:
            Iu = interpolate_patch(u)
            Iz = interpolate_patch(z)
            return estimate_interpolation(p, goal, (u, z), (Iu, Iz), pu), "interpolation"
        except PatchStructureError:
            log.info("no patch structure on this mesh, using the enriched estimator")
    return estimate_enriched(p, goal, (u, z), (u2, z2), pu), "enriched"


def run_single_goal(p: ProblemDef, g: GoalSpec, cfg: LoopConfig, reference: float | None = None,
                    on_step: Callable[[StepState], None] | None = None) -> list[MetricsRecord]:
    """Single-goal adaptive loop.

    Per step: solve, enriched solves, adjoint solves, estimate, localize,
    mark and refine.  Stops once ``|eta_h| <= 1e-2 tol``, the DoF budget is
    exceeded, ``max_steps`` is reached or nothing is marked.
    """
    p = cfg.fixed_rule(p)
    mesh = cfg.initial_mesh()
    records: list[MetricsRecord] = []
    u_prev = u2_prev = None
    step = 0
    while True:
        V = FeSpace(mesh, cfg.primal_degree)
        u, rep = _solve_primal(p, V, cfg, u_prev)
        J = goal_eval(g, u)
        err = reference - J if reference is not None else math.nan
        b = z = None
        kind = cfg.estimator
        if cfg.estimate:
            z = solve_adjoint(p, V, u, goal_derivative(g, u))
            u2 = z2 = None
            if cfg.estimator == "enriched" or not mesh.patch_structure():
                V2 = FeSpace(mesh, cfg.enriched_degree)
                u2, _ = _solve_primal(p, V2, cfg, u2_prev)
                z2 = solve_adjoint(p, V2, u2, goal_derivative(g, u2))
                u2_prev = u2
            b, kind = _estimate(p, g, cfg, mesh, u, z, u2, z2, V)
        rec = metrics(step, V.n_dofs, mesh.n_active, b, err, goal_value=J,
                      goal_errors=[err], newton_iterations=rep.iterations, estimator=kind)
        records.append(rec)
        log.info("step %d: dofs %d err %.3e eta %.3e", step, rec.dofs, err, rec.eta_h)
        if on_step is not None:
            on_step(StepState(step, mesh, u, z, b, rec))
        if _should_stop(cfg, rec, mesh):
            break
        new_mesh, rec.marked = _next_mesh(cfg, mesh, b)
        if new_mesh is None:
            break
        mesh, u_prev, step = new_mesh, u, step + 1
    return records


def run_multigoal(p: ProblemDef, goals: list[GoalSpec], weighting: WeightingSpec, cfg: LoopConfig,
                  references=None, on_step: Callable[[StepState], None] | None = None,
                  ) -> list[MetricsRecord]:
    """Adaptive loop driven by the combined error functional.

    The enriched primal problem is solved before the low-order one so that
    the signs ``sign(J_i(u2) - J_i(u))`` are available for the adjoint.
    The reported exact error is ``E(|J(u_ref) - J(u)|, m)``.
    """
    goals = list(goals)
    refs = None if references is None else np.asarray(references, dtype=float)
    p = cfg.fixed_rule(p)
    mesh = cfg.initial_mesh()
    records: list[MetricsRecord] = []
    u_prev = u2_prev = None
    step = 0
    while True:
        V = FeSpace(mesh, cfg.primal_degree)
        V2 = FeSpace(mesh, cfg.enriched_degree)
        u2, _ = _solve_primal(p, V2, cfg, u2_prev)
        u, rep = _solve_primal(p, V, cfg, u_prev)
        cg = CombinedGoal.prepare(goals, weighting, u2, u)
        z = solve_adjoint(p, V, u, combined_derivative(cg, u, V))
        z2 = solve_adjoint(p, V2, u2, combined_derivative(cg, u2, V2))
        b, kind = _estimate(p, cg.terms(), cfg, mesh, u, z, u2, z2, V)
        if refs is not None:
            errs = refs - cg.low_values
            exact = cg.error_measure(errs)
            rel = (errs / np.where(refs == 0.0, 1.0, np.abs(refs))).tolist()
        else:
            exact, rel = math.nan, []
        rec = metrics(step, V.n_dofs, mesh.n_active, b, exact, goal_value=cg.value(u),
                      goal_errors=rel, newton_iterations=rep.iterations, estimator=kind)
        records.append(rec)
        log.info("step %d: dofs %d err %.3e eta %.3e", step, rec.dofs, exact, rec.eta_h)
        if on_step is not None:
            on_step(StepState(step, mesh, u, z, b, rec))
        if _should_stop(cfg, rec, mesh):
            break
        new_mesh, rec.marked = _next_mesh(cfg, mesh, b)
        if new_mesh is None:
            break
        mesh, u_prev, u2_prev, step = new_mesh, u, u2, step + 1
    return records


# ----------------------------------------------------------------------
# output

CSV_COLUMNS = ["step", "dofs", "cells", "exact_err", "eta_h", "eta_p", "eta_a", "eta_k",
               "eta_total", "indicator_sum", "I_eff", "I_eff_plus", "I_eff_p", "I_eff_a",
               "I_ind", "goal_value", "newton_iterations", "marked"]


def write_csv(path, records: list[MetricsRecord], goal_names: list[str] | None = None) -> None:
    """One row per step; per-goal errors are appended as ``err_<name>`` columns."""
    n_goals = max((len(r.goal_errors) for r in records), default=0)
    names = goal_names or [f"goal{i + 1}" for i in range(n_goals)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS + [f"err_{n}" for n in names[:n_goals]])
        for r in records:
            d = asdict(r)
            d["exact_err"] = d.pop("exact_error")
            row = [d[c] for c in CSV_COLUMNS]
            row = [f"{v:.16e}" if isinstance(v, float) else v for v in row]
            row += [f"{e:.16e}" for e in r.goal_errors] + [""] * (n_goals - len(r.goal_errors))
            w.writerow(row)


def format_table(records: list[MetricsRecord]) -> str:
    """Fixed-width table with the columns Dofs, Exact err, Est err, Est ind, Eff, Ind."""
    rule = "=" * 80
    lines = [rule, f"{'Dofs':<8}{'Exact err':<16}{'Est err':<16}{'Est ind':<16}{'Eff':<16}Ind",
             "-" * 80]
    for r in records:
        vals = [r.exact_error, r.eta_h, r.indicator_sum, r.I_eff, r.I_ind]
        cells = [f"{v:.2e}" if math.isfinite(v) else "nan" for v in vals]
        lines.append(f"{r.dofs:<8d}" + "".join(f"{c:<16}" for c in cells[:-1]) + cells[-1])
    lines.append(rule)
    return "\n".join(lines) + "\n"


def fitted_slope(dofs, errors) -> float:
    """Least-squares slope of ``log|error|`` against ``log(dofs)``."""
    x = np.log(np.asarray(dofs, dtype=float))
    y = np.log(np.abs(np.asarray(errors, dtype=float)))
    return float(np.polyfit(x, y, 1)[0])
