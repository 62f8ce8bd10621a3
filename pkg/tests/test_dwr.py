import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwrfem.assembly import GoalSpec, goal_derivative, goal_eval
from dwrfem.dwr import (direct_eta_h, estimate_enriched, estimate_interpolation,
                        iteration_error, localize_to_elements)
from dwrfem.fespace import FeSpace, SpaceError, interpolate_patch, pu_basis
from dwrfem.mesh import build_grid, refine_uniform
from dwrfem.solvers import newton_solve, solve_adjoint

from conftest import ARCTAN, CENTER, HOLES, POISSON, UNIT, random_mesh


def solve_pair(p, g, mesh, k):
    V = FeSpace(mesh, k)
    u, _ = newton_solve(p, V)
    z = solve_adjoint(p, V, u, goal_derivative(g, u))
    return u, z


def breakdown(p, g, mesh, k=1, k2=2, kpu=1):
    u, z = solve_pair(p, g, mesh, k)
    u2, z2 = solve_pair(p, g, mesh, k2)
    return estimate_enriched(p, g, (u, z), (u2, z2), pu_basis(mesh, kpu)), (u, z, u2, z2)


@pytest.mark.parametrize("p, g, spec", [
    (POISSON, CENTER, UNIT),
    (ARCTAN, GoalSpec("point_value", point=(0.2, 0.2)), HOLES),
])
@pytest.mark.parametrize("k", [1, 2])
def test_equal_degrees_give_zero(p, g, spec, k):
    mesh = refine_uniform(build_grid(spec), 1)
    b, (u, *_) = breakdown(p, g, mesh, k, k)
    assert abs(b.eta_h) <= 1e-10 * (1 + abs(goal_eval(g, u)))


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 1000), kpu=st.integers(1, 3))
def test_enriched_estimate_is_exact_for_linear_problems(seed, kpu):
    mesh = random_mesh(seed, 2)
    b, (u, z, u2, z2) = breakdown(POISSON, CENTER, mesh, 1, 2, kpu)
    exact = goal_eval(CENTER, u2) - goal_eval(CENTER, u)
    assert b.eta_h == pytest.approx(exact, rel=1e-9, abs=1e-14)
    # linear problem with a linear goal: primal and adjoint parts coincide
    assert b.eta_p == pytest.approx(b.eta_a, rel=1e-10)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 1000), kpu=st.integers(1, 3))
def test_pu_identity_and_conservation(seed, kpu):
    mesh = random_mesh(seed, 2)
    b, pairs = breakdown(POISSON, CENTER, mesh, 1, 2, kpu)
    assert abs(b.nodal.sum() - b.eta_h) <= 1e-12 * (1 + abs(b.eta_h))
    assert abs(b.nodal_raw.sum() - b.eta_h) <= 1e-12 * (1 + abs(b.eta_h))
    assert b.element.sum() == pytest.approx(np.abs(b.nodal).sum(), rel=1e-13)
    assert b.indicator_sum >= abs(b.eta_h) - 1e-15
    u, z, u2, z2 = pairs
    assert direct_eta_h(POISSON, CENTER, (u, z), (u2, z2)) == pytest.approx(b.eta_h, rel=1e-9)


def test_nonlinear_estimate_close_to_enriched_error():
    mesh = refine_uniform(build_grid(HOLES), 2)
    g = GoalSpec("point_value", point=(0.2, 0.2))
    b, (u, z, u2, z2) = breakdown(ARCTAN, g, mesh)
    exact = goal_eval(g, u2) - goal_eval(g, u)
    assert b.eta_h == pytest.approx(exact, rel=0.05)


def test_iteration_error_vanishes_at_converged_solution():
    mesh = refine_uniform(build_grid(HOLES), 1)
    u, z = solve_pair(ARCTAN, GoalSpec("l2_norm_squared"), mesh, 1)
    assert abs(iteration_error(ARCTAN, u, z)) < 1e-9


def test_interpolation_estimator_degenerates_to_enriched():
    mesh = refine_uniform(build_grid(UNIT), 2)
    b2, (u, z, u2, z2) = breakdown(POISSON, CENTER, mesh)
    pu = pu_basis(mesh, 1)
    bi = estimate_interpolation(POISSON, CENTER, (u, z), (u2, z2), pu)
    assert bi.eta_h == pytest.approx(b2.eta_h, rel=1e-10)
    assert abs(bi.eta_Iu) <= 1e-10 and abs(bi.eta_Iz) <= 1e-10


def test_interpolation_estimator_with_patch_interpolants():
    mesh = refine_uniform(build_grid(UNIT), 3)
    b2, (u, z, u2, z2) = breakdown(POISSON, CENTER, mesh)
    Iu, Iz = interpolate_patch(u), interpolate_patch(z)
    bi = estimate_interpolation(POISSON, CENTER, (u, z), (Iu, Iz), pu_basis(mesh, 1))
    exact = goal_eval(CENTER, u2) - goal_eval(CENTER, u)
    assert np.sign(bi.eta_h) == np.sign(exact)
    assert 0.3 < bi.eta_h / exact < 3.0


@pytest.mark.parametrize("point", [(0.5, 0.5), (0.3, 0.4)])
def test_interpolation_parts_telescope_for_linear_problems(point):
    """For linear A and J: eta_I + eta_Iu + eta_Iz = J(Iu) - J(u) (Galerkin orthogonality)."""
    g = GoalSpec("point_value", point=point)
    mesh = refine_uniform(build_grid(UNIT), 2)
    u, z = solve_pair(POISSON, g, mesh, 1)
    Iu, Iz = interpolate_patch(u), interpolate_patch(z)
    bi = estimate_interpolation(POISSON, g, (u, z), (Iu, Iz), pu_basis(mesh, 1))
    lhs = bi.eta_h + bi.eta_Iu + bi.eta_Iz
    assert lhs == pytest.approx(goal_eval(g, Iu) - goal_eval(g, u), abs=1e-13)


def test_localize_checks_shapes(hanging_mesh, unit_mesh):
    b, _ = breakdown(POISSON, CENTER, hanging_mesh)
    with pytest.raises(SpaceError):
        localize_to_elements(b, unit_mesh, pu_basis(unit_mesh, 1))
