"""Reference values for the nonlinear example on the domain with two holes.

Each goal is computed by a separate single-goal adaptive run with Q2
elements and a Q3 enriched space.  The reported reference is the
estimate-corrected value ``J(u_h) + eta_h`` on the finest mesh together
with the last estimate, which bounds the uncertainty.

Usage: python3 scripts/compute_references.py [max_dofs]
"""

import sys
import time

from dwrfem.adapt import LoopConfig, run_single_goal
from dwrfem.assembly import GoalSpec, ProblemDef
from dwrfem.mesh import DomainSpec

DOMAIN = DomainSpec((0.0, 0.0, 5.0, 3.0), 5, 3, ((1.0, 1.0, 2.0, 2.0), (3.0, 1.0, 4.0, 2.0)))
GOALS = {
    "flux_left": GoalSpec("flux_on_segment", segment="left"),
    "u(0.2,0.2)": GoalSpec("point_value", point=(0.2, 0.2)),
    "u(0.9,0.1)": GoalSpec("point_value", point=(0.9, 0.1)),
    "l2sq": GoalSpec("l2_norm_squared"),
}


def main(max_dofs: int = 150000) -> None:
    p = ProblemDef("nonlinear_arctan", 10.0)
    cfg = LoopConfig(domain=DOMAIN, initial_refinements=1, primal_degree=2, enriched_degree=3,
                     theta=0.5, tol=0.0, max_dofs=max_dofs)
    for name, g in GOALS.items():
        t = time.time()
        recs = run_single_goal(p, g, cfg)
        last = recs[-1]
        print(f"{name}: J = {last.goal_value:.15e}  J + eta = {last.goal_value + last.eta_h:.15e}"
              f"  eta = {last.eta_h:.3e}  dofs = {last.dofs}  ({time.time() - t:.0f} s)", flush=True)


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:]))
