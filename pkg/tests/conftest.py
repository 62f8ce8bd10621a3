import numpy as np
import pytest

from dwrfem.assembly import GoalSpec, ProblemDef
from dwrfem.mesh import DomainSpec, build_grid, refine, refine_uniform

UNIT = DomainSpec((0.0, 0.0, 1.0, 1.0), 2, 2)
HOLES = DomainSpec((0.0, 0.0, 5.0, 3.0), 5, 3, ((1.0, 1.0, 2.0, 2.0), (3.0, 1.0, 4.0, 2.0)))
POISSON = ProblemDef("poisson", -1.0)
ARCTAN = ProblemDef("nonlinear_arctan", 10.0)
CENTER = GoalSpec("point_value", point=(0.5, 0.5))
REFERENCE_EX1 = -7.3671353258859554e-02


def random_mesh(seed: int, steps: int = 3, spec: DomainSpec = UNIT, frac: float = 0.3):
    """Mesh refined at random cells; always contains hanging nodes after the first step."""
    rng = np.random.default_rng(seed)
    mesh = refine_uniform(build_grid(spec), 1)
    for _ in range(steps):
        n = max(1, int(frac * mesh.n_active))
        pick = rng.choice(mesh.n_active, size=n, replace=False)
        mesh = refine(mesh, mesh.active[pick])
    return mesh


@pytest.fixture
def unit_mesh():
    return build_grid(UNIT)


@pytest.fixture
def hanging_mesh():
    mesh = refine_uniform(build_grid(UNIT), 1)
    return refine(mesh, [mesh.active[0]])
