import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwrfem.timeconsistency import (DgZeroFunction, OdeProblem, backward_euler, consistency_term,
                                    dg_form, discrete_adjoint, discrete_form, estimate_ode_error,
                                    run_study, write_study_csv)

DECAY = OdeProblem(lambda t, u: -u, lambda t, u: -1.0, 1.0, 1.0, 16)
FORCED = OdeProblem(lambda t, u: -u + math.cos(t), lambda t, u: -1.0, 1.0, 1.0, 16)
FORCED_EXACT = 0.5 * (math.cos(1.0) + math.sin(1.0)) + 0.5 * math.exp(-1.0)


def test_problem_validation():
    with pytest.raises(ValueError):
        DECAY.with_steps(0)
    with pytest.raises(ValueError):
        OdeProblem(lambda t, u: -u, lambda t, u: -1.0, 1.0, 0.0, 4)


@settings(max_examples=20, deadline=None)
@given(N=st.integers(1, 200))
def test_backward_euler_closed_form(N):
    p = DECAY.with_steps(N)
    u = backward_euler(p)
    dt = 1.0 / N
    np.testing.assert_allclose(u.values, (1 + dt) ** -np.arange(N + 1), rtol=1e-12)
    z = discrete_adjoint(p, u)
    np.testing.assert_allclose(z[1:], (1 + dt) ** -(N + 1 - np.arange(1, N + 2)), rtol=1e-12)


def test_dg_zero_function_evaluation():
    f = DgZeroFunction(np.array([1.0, 2.0, 3.0]), 1.0)
    assert f(0.0) == 1.0
    assert f(0.25) == 2.0 and f(0.5) == 2.0
    assert f(0.51) == 3.0 and f(1.0) == 3.0


@pytest.mark.parametrize("p", [DECAY, FORCED])
def test_discrete_solution_annihilates_discrete_form(p):
    u = backward_euler(p)
    v = np.random.default_rng(0).standard_normal(p.N + 1)
    assert abs(discrete_form(p, u.values, v)) < 1e-12


@pytest.mark.parametrize("p", [DECAY, FORCED])
def test_consistency_term_is_form_difference(p):
    u = backward_euler(p)
    z = discrete_adjoint(p, u)
    S = consistency_term(p, u, z)
    diff = discrete_form(p, u.values, z[:p.N + 1]) - dg_form(p, u.values, z[:p.N + 1])
    assert S.sum() == pytest.approx(diff, abs=1e-14)


def test_autonomous_problem_has_no_consistency_error():
    est = estimate_ode_error(DECAY.with_steps(64))
    assert np.all(np.abs(est.consistency_local) < 1e-15)


@pytest.mark.parametrize("N", [32, 128])
def test_forced_problem_needs_consistency_term(N):
    p = FORCED.with_steps(N)
    u = backward_euler(p)
    err = FORCED_EXACT - u.values[-1]
    est = estimate_ode_error(p, u)
    assert est.estimate / err == pytest.approx(1.0, abs=0.01)
    assert abs(est.weighted_residual / err - 1.0) > 1.0
    assert est.estimate == pytest.approx(est.weighted_residual + est.consistency)


def test_forced_consistency_is_first_order():
    s = [abs(estimate_ode_error(FORCED.with_steps(N)).consistency) for N in (32, 64, 128)]
    rates = np.log2(np.array(s[:-1]) / np.array(s[1:]))
    np.testing.assert_allclose(rates, 1.0, atol=0.05)


def test_study_rows_and_csv(tmp_path):
    rows = run_study(DECAY, [8, 16], math.exp(-1.0))
    assert [r[0] for r in rows] == [8, 16]
    for N, err, est, weighted, cons, eff in rows:
        assert eff == pytest.approx(est / err)
        assert 0.9 < eff < 1.1
    write_study_csv(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "N,true_error,estimate,weighted_residual,consistency,I_eff"
    assert len(lines) == 3
