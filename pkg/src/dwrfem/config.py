"""Experiment configuration files (TOML).

A config describes one experiment.  Top-level keys: ``name``,
``description`` and ``kind`` (``single_goal``, ``multigoal`` or ``ode``).
Tables: ``[problem]``, ``[domain]``, ``[goal]`` or ``[[goals]]``,
``[weighting]``, ``[discretization]``, ``[adapt]``, ``[newton]``,
``[reference]`` and, for ODE studies, ``[ode]``.  The full schema is
documented in the README.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adapt import LoopConfig
from .assembly import GOAL_KINDS, GoalSpec, ProblemDef
from .mesh import DomainSpec, build_grid
from .multigoal import KINDS as WEIGHTING_KINDS
from .multigoal import WeightingSpec
from .solvers import StoppingRule
from .timeconsistency import OdeProblem

EXPERIMENT_KINDS = ("single_goal", "multigoal", "ode")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


ODE_PROBLEMS = {
    # name: (f, f_u, exact solution u(t) for u(0) = u0)
    "decay": (lambda t, u: -u, lambda t, u: -1.0,
              lambda t, u0: u0 * math.exp(-t)),
    "forced_decay": (lambda t, u: -u + math.cos(t), lambda t, u: -1.0,
                     lambda t, u0: 0.5 * (math.cos(t) + math.sin(t)) + (u0 - 0.5) * math.exp(-t)),
}


@dataclass
class ExperimentConfig:
    name: str
    description: str
    kind: str
    problem: ProblemDef | None = None
    goals: list[GoalSpec] = field(default_factory=list)
    weighting: WeightingSpec | None = None
    loop: LoopConfig | None = None
    references: list[float] | None = None
    reference_source: str = ""
    ode: OdeProblem | None = None
    ode_steps: list[int] = field(default_factory=list)
    ode_exact: float | None = None
    ode_name: str = ""
    write_vtk: bool = True
    source_path: str = ""


def _table(data: dict, key: str, required: bool = True) -> dict:
    val = data.get(key)
    if val is None:
        if required:
            raise ConfigError(f"missing [{key}] table")
        return {}
    if not isinstance(val, dict):
        raise ConfigError(f"[{key}] must be a table")
    return val


def _check_keys(tbl: dict, allowed: set[str], where: str) -> None:
    extra = set(tbl) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(extra))}")


def _num(tbl: dict, key: str, default=None, kind=float, where: str = ""):
    if key not in tbl:
        if default is None:
            raise ConfigError(f"missing key {key!r} in {where}")
        return default
    val = tbl[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number")
    if kind is int:
        if int(val) != val:
            raise ConfigError(f"{where}.{key} must be an integer")
        return int(val)
    return float(val)


def _goal(tbl: dict, where: str) -> GoalSpec:
    _check_keys(tbl, {"kind", "point", "segment", "name"}, where)
    kind = tbl.get("kind")
    if kind not in GOAL_KINDS:
        raise ConfigError(f"{where}.kind must be one of {', '.join(GOAL_KINDS)}")
    if kind == "point_velocity_placeholder":
        raise ConfigError("vector-valued goals are not supported")
    point = tbl.get("point")
    if point is not None:
        if not (isinstance(point, list) and len(point) == 2):
            raise ConfigError(f"{where}.point must be [x, y]")
        point = (float(point[0]), float(point[1]))
    try:
        return GoalSpec(kind, point=point, segment=tbl.get("segment"), name=tbl.get("name", ""))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _domain(tbl: dict) -> tuple[DomainSpec, int]:
    _check_keys(tbl, {"bbox", "nx", "ny", "removed", "initial_refinements"}, "[domain]")
    bbox = tbl.get("bbox")
    if not (isinstance(bbox, list) and len(bbox) == 4):
        raise ConfigError("[domain].bbox must be [x0, y0, x1, y1]")
    removed = tbl.get("removed", [])
    if not isinstance(removed, list) or any(not (isinstance(b, list) and len(b) == 4) for b in removed):
        raise ConfigError("[domain].removed must be a list of [x0, y0, x1, y1] boxes")
    spec = DomainSpec(tuple(float(v) for v in bbox), _num(tbl, "nx", kind=int, where="[domain]"),
                      _num(tbl, "ny", kind=int, where="[domain]"),
                      tuple(tuple(float(v) for v in b) for b in removed))
    try:
        build_grid(spec)
    except ValueError as exc:
        raise ConfigError(f"[domain]: {exc}") from exc
    refs = _num(tbl, "initial_refinements", 0, int, "[domain]")
    if refs < 0:
        raise ConfigError("[domain].initial_refinements must be >= 0")
    return spec, refs


def parse_config(data: dict, source: str = "") -> ExperimentConfig:
    """Validate a decoded TOML document and build the experiment description."""
    _check_keys(data, {"name", "description", "kind", "problem", "domain", "goal", "goals",
                       "weighting", "discretization", "adapt", "newton", "reference", "ode",
                       "output"}, "config")
    name = data.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError("missing experiment name")
    kind = data.get("kind")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"kind must be one of {', '.join(EXPERIMENT_KINDS)}")
    cfg = ExperimentConfig(name, str(data.get("description", "")), kind, source_path=source)
    out = _table(data, "output", required=False)
    _check_keys(out, {"vtk"}, "[output]")
    cfg.write_vtk = bool(out.get("vtk", True))

    if kind == "ode":
        tbl = _table(data, "ode")
        _check_keys(tbl, {"problem", "u0", "T", "steps"}, "[ode]")
        pname = tbl.get("problem")
        if pname not in ODE_PROBLEMS:
            raise ConfigError(f"[ode].problem must be one of {', '.join(ODE_PROBLEMS)}")
        f, fu, exact = ODE_PROBLEMS[pname]
        u0 = _num(tbl, "u0", 1.0, where="[ode]")
        T = _num(tbl, "T", 1.0, where="[ode]")
        steps = tbl.get("steps")
        if not (isinstance(steps, list) and steps and all(isinstance(s, int) and s >= 1 for s in steps)):
            raise ConfigError("[ode].steps must be a list of positive integers")
        try:
            cfg.ode = OdeProblem(f, fu, u0, T, steps[0])
        except ValueError as exc:
            raise ConfigError(f"[ode]: {exc}") from exc
        cfg.ode_steps = list(steps)
        cfg.ode_exact = exact(T, u0)
        cfg.ode_name = pname
        return cfg

    prob = _table(data, "problem")
    _check_keys(prob, {"kind", "source"}, "[problem]")
    try:
        cfg.problem = ProblemDef(prob.get("kind", "poisson"), _num(prob, "source", 1.0, where="[problem]"))
    except ValueError as exc:
        raise ConfigError(f"[problem]: {exc}") from exc

    domain, n_init = _domain(_table(data, "domain"))

    if kind == "single_goal":
        if "goals" in data:
            raise ConfigError("single_goal experiments take one [goal] table")
        cfg.goals = [_goal(_table(data, "goal"), "[goal]")]
    else:
        goals = data.get("goals")
        if not isinstance(goals, list) or not goals:
            raise ConfigError("multigoal experiments need [[goals]] entries")
        cfg.goals = [_goal(g, f"[[goals]][{i}]") for i, g in enumerate(goals)]
        w = _table(data, "weighting", required=False)
        _check_keys(w, {"kind", "omega", "m", "p", "frozen"}, "[weighting]")
        wkind = w.get("kind", "relative_sum")
        if wkind not in WEIGHTING_KINDS:
            raise ConfigError(f"[weighting].kind must be one of {', '.join(WEIGHTING_KINDS)}")
        try:
            cfg.weighting = WeightingSpec(wkind, m=w.get("m"), omega=w.get("omega"),
                                          p=_num(w, "p", 2.0, where="[weighting]"),
                                          frozen=bool(w.get("frozen", False)))
        except ValueError as exc:
            raise ConfigError(f"[weighting]: {exc}") from exc
        for arr, label in ((cfg.weighting.omega, "omega"), (cfg.weighting.m, "m")):
            if arr is not None and arr.shape != (len(cfg.goals),):
                raise ConfigError(f"[weighting].{label} needs one entry per goal")

    mesh0 = build_grid(domain)
    for g in cfg.goals:
        if g.point is not None:
            try:
                mesh0.locate(g.point)
            except ValueError as exc:
                raise ConfigError(f"goal point {g.point} lies outside the domain") from exc

    disc = _table(data, "discretization")
    _check_keys(disc, {"primal_degree", "enriched_degree", "pu_degree", "estimator",
                       "galerkin_demo"}, "[discretization]")
    k = _num(disc, "primal_degree", 1, int, "[discretization]")
    k2 = _num(disc, "enriched_degree", k + 1, int, "[discretization]")
    kpu = _num(disc, "pu_degree", 1, int, "[discretization]")
    if not (1 <= k <= 4 and 1 <= k2 <= 4):
        raise ConfigError("degrees must lie in 1..4")
    if not 1 <= kpu <= 3:
        raise ConfigError("pu_degree must lie in 1..3")
    if k2 <= k and not disc.get("galerkin_demo", False):
        raise ConfigError("enriched_degree must exceed primal_degree "
                          "(set galerkin_demo = true to run the equal-order demonstration)")

    ad = _table(data, "adapt", required=False)
    _check_keys(ad, {"theta", "tol", "max_dofs", "max_steps", "uniform", "estimate"}, "[adapt]")
    nw = _table(data, "newton", required=False)
    _check_keys(nw, {"atol", "max_iters"}, "[newton]")
    try:
        cfg.loop = LoopConfig(
            domain=domain, initial_refinements=n_init, primal_degree=k, enriched_degree=k2,
            pu_degree=kpu, estimator=disc.get("estimator", "enriched"),
            theta=_num(ad, "theta", 0.5, where="[adapt]"), tol=_num(ad, "tol", 1e-8, where="[adapt]"),
            max_dofs=_num(ad, "max_dofs", 20000, int, "[adapt]"),
            max_steps=_num(ad, "max_steps", 50, int, "[adapt]"),
            uniform=bool(ad.get("uniform", False)), estimate=bool(ad.get("estimate", True)),
            newton=StoppingRule(atol=_num(nw, "atol", 1e-10, where="[newton]"),
                                max_iters=_num(nw, "max_iters", 30, int, "[newton]")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 < cfg.loop.theta <= 1.0:
        raise ConfigError("[adapt].theta must lie in (0, 1]")

    ref = _table(data, "reference", required=False)
    _check_keys(ref, {"value", "values", "source"}, "[reference]")
    if "value" in ref:
        cfg.references = [_num(ref, "value", where="[reference]")]
    elif "values" in ref:
        vals = ref["values"]
        if not isinstance(vals, list) or len(vals) != len(cfg.goals):
            raise ConfigError("[reference].values needs one entry per goal")
        cfg.references = [float(v) for v in vals]
    if cfg.references is not None and len(cfg.references) != len(cfg.goals):
        raise ConfigError("reference values do not match the goals")
    cfg.reference_source = str(ref.get("source", ""))
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a config file; raises :class:`ConfigError`."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, str(path))


def bundled_configs() -> dict[str, Path]:
    """Name to path of every config shipped with the package."""
    root = resources.files("dwrfem") / "configs"
    paths = [Path(str(p)) for p in root.iterdir() if str(p).endswith(".toml")]
    # natural order: example1_comp2 before example1_comp10
    key = lambda q: [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", q.stem)]
    return {q.stem: q for q in sorted(paths, key=key)}


def resolve(name_or_path: str) -> Path:
    """Accept either a file path or the name of a bundled config."""
    p = Path(name_or_path)
    if p.exists():
        return p
    configs = bundled_configs()
    if name_or_path in configs:
        return configs[name_or_path]
    raise ConfigError(f"no config file or bundled experiment named {name_or_path!r}")
