"""Mirror-descent oracle and finite differences."""

import numpy as np
import pytest

from otmil.oracle import OracleConfig, OracleError, finite_diff_gradient, oracle_solve
from otmil.ot_core import (
    OtError,
    OtProblem,
    build_augmented,
    entropic_objective,
    solve_heterogeneity_ot,
)
from otmil.verify import oracle_suite


def test_zero_cost_uniform_like_solver():
    problem = OtProblem(np.zeros((3, 2)), rho=1.0)
    plan = oracle_solve(build_augmented(problem), problem.epsilon)
    assert np.allclose(plan.mass, 1 / 6, atol=1e-6)
    assert np.allclose(plan.mass, solve_heterogeneity_ot(problem).mass, atol=1e-6)


def test_single_cell_split():
    problem = OtProblem([[0.4]], rho=0.7)
    plan = oracle_solve(build_augmented(problem), problem.epsilon)
    assert plan.mass[0, 0] == pytest.approx(0.7, abs=1e-6)
    assert plan.sink_mass[0] == pytest.approx(0.3, abs=1e-6)


def test_seeded_6x3_not_worse_than_solver():
    problem = OtProblem(np.random.default_rng(1).uniform(size=(6, 3)), rho=0.8)
    aug = build_augmented(problem)
    ref = oracle_solve(aug, problem.epsilon)
    sol = solve_heterogeneity_ot(problem)
    assert entropic_objective(ref, aug, 0.05) <= entropic_objective(sol, aug, 0.05) + 1e-4


def test_rows_feasible_by_construction():
    problem = OtProblem(np.random.default_rng(2).uniform(size=(7, 3)), rho=0.4, kl_weight=0.5)
    plan = oracle_solve(build_augmented(problem), problem.epsilon)
    assert np.allclose(plan.full.sum(axis=1), 1 / 7, atol=1e-8)
    assert plan.sink_mass.sum() == pytest.approx(0.6, abs=1e-8)


def test_size_limits():
    with pytest.raises(OtError):
        oracle_solve(build_augmented(OtProblem(np.zeros((17, 2)))), 0.05)
    with pytest.raises(OtError):
        oracle_solve(build_augmented(OtProblem(np.zeros((2, 9)))), 0.05)
    with pytest.raises(OtError):
        oracle_solve(build_augmented(OtProblem(np.zeros((2, 2)), global_constraint="equality")), 0.05)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_oversized_step_is_detected():
    problem = OtProblem(np.random.default_rng(3).uniform(size=(5, 3)), rho=0.6, kl_weight=0.5)
    with pytest.raises(OracleError, match="rose|step too large"):
        oracle_solve(build_augmented(problem), problem.epsilon,
                     OracleConfig(iterations=5000, step=500.0, window=1000))


def test_suite_agreement_small():
    cases = oracle_suite(n_cases=8, seed=3)
    assert all(c.passed() for c in cases), [c for c in cases if not c.passed()]


def test_finite_diff_square():
    g = finite_diff_gradient(lambda x: float(x[0] ** 2), [3.0], h=1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-7)


def test_finite_diff_constant():
    g = finite_diff_gradient(lambda x: 4.2, np.ones((2, 3)))
    assert g.shape == (2, 3) and np.all(g == 0.0)


def test_finite_diff_does_not_mutate_point():
    x = np.array([1.0, 2.0])
    finite_diff_gradient(lambda v: float(v @ v), x)
    assert x.tolist() == [1.0, 2.0]
