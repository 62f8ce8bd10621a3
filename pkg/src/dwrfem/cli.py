"""Command line runner for the bundled and user-supplied experiments.

    dwrfem list
    dwrfem run example1_comp2 [more configs ...] [--jobs N] [--output-dir DIR] [--quiet]

Each experiment writes ``table.txt``, ``steps.csv`` and (for mesh-based
runs) ``step_XXX.vtk`` into ``<output-dir>/<name>/``.  Exit status 0 on
success, 2 on configuration errors (nothing is written), 3 on numerical
failure (outputs of the completed steps are kept).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .adapt import StepState, format_table, run_multigoal, run_single_goal, write_csv
from .config import ConfigError, ExperimentConfig, bundled_configs, load_config, resolve
from .fespace import FeFunction
from .mesh import write_vtk
from .solvers import LinearSolveError, NonConvergenceError
from .timeconsistency import StepNewtonError, run_study, write_study_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (NonConvergenceError, LinearSolveError, StepNewtonError,
                    FloatingPointError, np.linalg.LinAlgError)

log = logging.getLogger("dwrfem")


def vertex_values(f: FeFunction) -> np.ndarray:
    """Values of ``f`` at the mesh vertices (corner DoFs of the active cells)."""
    k = f.space.degree
    mesh = f.space.mesh
    corners = [0, k, (k + 1) ** 2 - 1, k * (k + 1)]   # same order as ``cell_vertices``
    coef = f.space.distribute(f.coef)
    out = np.zeros(len(mesh.vertices))
    out[mesh.cell_vertices.ravel()] = coef[f.space.cell_dofs[:, corners]].ravel()
    return out


def _goal_names(cfg: ExperimentConfig) -> list[str]:
    return [g.label for g in cfg.goals]


def _ode_table(rows) -> str:
    rule = "=" * 96
    head = f"{'N':<8}{'Exact err':<16}{'Est err':<16}{'Weighted':<16}{'Consistency':<16}{'Eff':<16}Eff w/o S_h"
    lines = [rule, head, "-" * 96]
    for N, err, est, weighted, cons, eff in rows:
        eff0 = weighted / err if err != 0 else math.nan
        vals = [err, est, weighted, cons, eff, eff0]
        lines.append(f"{N:<8d}" + "".join(f"{v:<16.2e}" for v in vals[:-1]) + f"{vals[-1]:.2e}")
    lines.append(rule)
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, out_dir: Path, quiet: bool = False) -> int:
    """Run one validated experiment and write its outputs into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path, csv_path = out_dir / "table.txt", out_dir / "steps.csv"

    if cfg.kind == "ode":
        rows = []
        try:
            for N in cfg.ode_steps:
                rows += run_study(cfg.ode, [N], cfg.ode_exact)
                write_study_csv(csv_path, rows)
                table_path.write_text(_ode_table(rows))
        except NUMERICAL_ERRORS as exc:
            print(f"{cfg.name}: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        if not quiet:
            print(f"{cfg.name}\n{_ode_table(rows)}", end="")
        return EXIT_OK

    records = []
    names = _goal_names(cfg)

    def on_step(state: StepState) -> None:
        records.append(state.record)
        write_csv(csv_path, records, names)
        table_path.write_text(format_table(records))
        if cfg.write_vtk:
            cell_data = {}
            if state.breakdown is not None:
                cell_data["indicator"] = state.breakdown.element
            write_vtk(out_dir / f"step_{state.step:03d}.vtk", state.mesh,
                      point_data={"u": vertex_values(state.u)}, cell_data=cell_data,
                      title=f"{cfg.name} step {state.step}")
        if not quiet:
            r = state.record
            print(f"{cfg.name}: step {r.step} dofs {r.dofs} err {r.exact_error:.3e} "
                  f"eta {r.eta_h:.3e}", flush=True)

    try:
        if cfg.kind == "single_goal":
            ref = None if cfg.references is None else cfg.references[0]
            run_single_goal(cfg.problem, cfg.goals[0], cfg.loop, ref, on_step=on_step)
        else:
            run_multigoal(cfg.problem, cfg.goals, cfg.weighting, cfg.loop, cfg.references,
                          on_step=on_step)
    except NUMERICAL_ERRORS as exc:
        print(f"{cfg.name}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if not quiet:
        print(format_table(records), end="")
    return EXIT_OK


def _run_path(args: tuple[str, str, bool]) -> int:
    path, out_root, quiet = args
    cfg = load_config(path)
    return run_experiment(cfg, Path(out_root) / cfg.name, quiet)


def cmd_list() -> int:
    for name, path in bundled_configs().items():
        try:
            desc = load_config(path).description
        except ConfigError as exc:
            desc = f"(invalid: {exc})"
        print(f"{name:<24}{desc}")
    return EXIT_OK


def cmd_run(configs: list[str], out_root: str, jobs: int, quiet: bool) -> int:
    # validate everything before touching the file system
    try:
        paths = [resolve(c) for c in configs]
        parsed = [load_config(p) for p in paths]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seen = set()
    for cfg in parsed:
        if cfg.name in seen:
            print(f"config error: duplicate experiment name {cfg.name!r}", file=sys.stderr)
            return EXIT_CONFIG
        seen.add(cfg.name)
    if jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            codes = list(pool.map(_run_path, [(str(p), out_root, quiet) for p in paths]))
    else:
        codes = [run_experiment(cfg, Path(out_root) / cfg.name, quiet) for cfg in parsed]
    return max(codes, default=EXIT_OK)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dwrfem", description="Goal-oriented adaptive FEM experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list the bundled experiments")
    run = sub.add_parser("run", help="run one or more experiments")
    run.add_argument("configs", nargs="+", help="config file paths or bundled experiment names")
    run.add_argument("--jobs", type=int, default=1, help="parallel processes (default 1)")
    run.add_argument("--output-dir", default="results", help="output root (default ./results)")
    run.add_argument("--quiet", action="store_true", help="suppress progress output")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        return cmd_list()
    if args.jobs < 1:
        print("config error: --jobs must be positive", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    return cmd_run(args.configs, args.output_dir, args.jobs, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
