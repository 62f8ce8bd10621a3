import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwrfem.assembly import (GoalSpec, ProblemDef, Tests, assemble_jacobian, assemble_residual,
                             goal_derivative, goal_eval, quad_points, residual_raw)
from dwrfem.fespace import FeFunction, FeSpace, interpolate
from dwrfem.mesh import build_grid, refine_uniform
from dwrfem.solvers import solve_sparse

from conftest import ARCTAN, HOLES, POISSON, UNIT, random_mesh


def _random_function(V, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return FeFunction.from_free(V, scale * rng.standard_normal(V.n_free))


def test_problem_kinds():
    assert POISSON.linear and not ARCTAN.linear
    with pytest.raises(ValueError):
        ProblemDef("heat")
    g = np.array([[3.0, 4.0]])
    np.testing.assert_allclose(ARCTAN.flux(g), (2 + np.arctan(25.0)) * g)


def test_goal_spec_validation():
    with pytest.raises(ValueError):
        GoalSpec("point_value")
    with pytest.raises(ValueError):
        GoalSpec("flux_on_segment")
    with pytest.raises(ValueError):
        GoalSpec("mean")
    assert GoalSpec("point_value", point=(0.2, 0.2)).label == "u(0.2,0.2)"


def test_point_velocity_is_unsupported(unit_mesh):
    g = GoalSpec("point_velocity_placeholder")
    with pytest.raises(NotImplementedError):
        goal_eval(g, FeFunction.zeros(FeSpace(unit_mesh, 1)))


def test_single_interior_node_poisson(unit_mesh):
    # 2x2 Q1 grid: one unknown, stiffness 8/3, load f * h^2 = -1/4
    V = FeSpace(unit_mesh, 1)
    assert V.n_free == 1
    u0 = FeFunction.zeros(V)
    sys_ = assemble_jacobian(POISSON, V, u0, -assemble_residual(POISSON, V, u0))
    assert sys_.matrix.toarray()[0, 0] == pytest.approx(8.0 / 3.0)
    u = sys_.expand(solve_sparse(sys_))
    assert u((0.5, 0.5)) == pytest.approx(-0.09375)


def test_quad_points_monotone():
    assert quad_points(1) >= 2
    assert quad_points(4, 4, 3) >= quad_points(1, 1, 1)


@pytest.mark.parametrize("k", [1, 2])
def test_jacobian_matches_central_differences(k):
    mesh = refine_uniform(build_grid(HOLES), 1)
    V = FeSpace(mesh, k)
    u = _random_function(V, 1, 0.5)
    K = assemble_jacobian(ARCTAN, V, u).matrix
    free = V.free_dofs
    rng = np.random.default_rng(2)
    for _ in range(5):
        d = rng.standard_normal(V.n_free)
        eps = 1e-6
        rp = assemble_residual(ARCTAN, V, u + FeFunction.from_free(V, eps * d))[free]
        rm = assemble_residual(ARCTAN, V, u - FeFunction.from_free(V, eps * d))[free]
        fd = (rp - rm) / (2 * eps)
        jd = K @ d
        assert np.linalg.norm(fd - jd) <= 1e-6 * np.linalg.norm(jd)


def test_jacobian_symmetric_for_poisson(hanging_mesh):
    V = FeSpace(hanging_mesh, 2)
    K = assemble_jacobian(POISSON, V, FeFunction.zeros(V)).matrix
    assert abs(K - K.T).max() < 1e-13


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_residual_linear_in_test_weights(seed):
    """The raw residual vector contracts to A(u)(w) for a weight w."""
    mesh = random_mesh(seed, 1)
    V = FeSpace(mesh, 1)
    W = FeSpace(mesh, 2)
    u = _random_function(V, seed)
    w = _random_function(W, seed + 1)
    direct = residual_raw(ARCTAN, u, Tests(W), nq=6) @ w.coef
    # weighted tests on the P1 partition of unity sum to the same number
    from dwrfem.fespace import pu_basis
    weighted = residual_raw(ARCTAN, u, Tests(pu_basis(mesh, 1), w), nq=6).sum()
    assert weighted == pytest.approx(direct, rel=1e-10, abs=1e-12)


def test_flux_of_linear_function():
    mesh = refine_uniform(build_grid(HOLES), 1)
    V = FeSpace(mesh, 1, dirichlet_markers=())
    u = interpolate(V, lambda x, y: x)
    assert goal_eval(GoalSpec("flux_on_segment", segment="left"), u) == pytest.approx(-3.0)
    assert goal_eval(GoalSpec("flux_on_segment", segment="bottom"), u) == pytest.approx(0.0, abs=1e-14)
    assert goal_eval(GoalSpec("flux_on_segment", segment="right"), u) == pytest.approx(3.0)


def test_l2_norm_and_point_value(hanging_mesh):
    V = FeSpace(hanging_mesh, 2, dirichlet_markers=())
    u = interpolate(V, lambda x, y: x * y)
    assert goal_eval(GoalSpec("l2_norm_squared"), u) == pytest.approx(1.0 / 9.0)
    assert goal_eval(GoalSpec("point_value", point=(0.3, 0.7)), u) == pytest.approx(0.21)


@pytest.mark.parametrize("goal", [
    GoalSpec("point_value", point=(0.2, 0.2)),
    GoalSpec("flux_on_segment", segment="left"),
    GoalSpec("l2_norm_squared"),
])
def test_goal_derivative_matches_differences(goal):
    mesh = refine_uniform(build_grid(HOLES), 1)
    V = FeSpace(mesh, 2)
    u = _random_function(V, 3)
    d = FeFunction.from_free(V, np.random.default_rng(4).standard_normal(V.n_free))
    eps = 1e-6
    fd = (goal_eval(goal, u + d * eps) - goal_eval(goal, u - d * eps)) / (2 * eps)
    exact = goal_derivative(goal, u) @ d.coef
    assert fd == pytest.approx(exact, rel=1e-7, abs=1e-9)
