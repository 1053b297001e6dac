"""Oracle-agreement and gradient-check suites (used by ``otmil verify``)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import Bag
from .model import ModelParams, SolverConfig, batch_loss, batch_loss_and_grad
from .oracle import OracleConfig, finite_diff_gradient, oracle_solve
from .ot_core import (
    OtProblem,
    build_augmented,
    entropic_objective,
    marginal_residuals,
    solve_heterogeneity_ot,
)

RHO_GRID = (0.3, 0.6, 1.0)
LAMBDA_GRID = (0.05, 0.1, 0.5)
EPSILON_GRID = (0.02, 0.05, 0.1)


@dataclass
class OracleCase:
    seed: int
    n: int
    k: int
    rho: float
    kl_weight: float
    epsilon: float
    objective_gap: float
    plan_gap: float
    row_residual: float
    mass_residual: float

    def passed(self, obj_tol=1e-4, plan_tol=1e-3, row_tol=1e-7, mass_tol=1e-4) -> bool:
        return (self.objective_gap <= obj_tol and self.plan_gap <= plan_tol
                and self.row_residual <= row_tol and self.mass_residual <= mass_tol)


def random_problem(rng, n_range=(2, 8), k_range=(1, 3)) -> OtProblem:
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    return OtProblem(
        rng.uniform(0.0, 1.0, size=(n, k)),
        rho=float(rng.choice(RHO_GRID)),
        kl_weight=float(rng.choice(LAMBDA_GRID)),
        epsilon=float(rng.choice(EPSILON_GRID)),
    )


def oracle_suite(n_cases: int = 50, seed: int = 0, tol: float = 1e-8,
                 oracle_cfg: OracleConfig = OracleConfig()) -> list[OracleCase]:
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        problem = random_problem(rng)
        aug = build_augmented(problem)
        plan = solve_heterogeneity_ot(problem, tol=tol)
        ref = oracle_solve(aug, problem.epsilon, oracle_cfg)
        gap = abs(entropic_objective(plan, aug, problem.epsilon)
                  - entropic_objective(ref, aug, problem.epsilon))
        row, mass = marginal_residuals(plan)
        cases.append(OracleCase(
            i, problem.n_instances, problem.n_tokens, problem.rho, problem.kl_weight,
            problem.epsilon, gap, float(np.max(np.abs(plan.full - ref.full))), row, mass,
        ))
    return cases


@dataclass
class GradientCase:
    seed: int
    rho: float
    rel_error: float
    group_errors: dict

    def passed(self, tol: float = 1e-4) -> bool:
        return self.rel_error <= tol


def random_batch(rng, n_bags=3, max_n=12, dim=8):
    bags = []
    for i in range(n_bags):
        n = int(rng.integers(2, max_n + 1))
        bags.append(Bag(rng.normal(size=(n, dim)), float(rng.uniform(0.5, 3.0)),
                        bool(i < 2 or rng.random() < 0.5), f"g{i}"))
    return bags


def gradient_case(seed: int, h: float = 1e-5, solver: SolverConfig | None = None) -> GradientCase:
    rng = np.random.default_rng(seed)
    latent = int(rng.integers(2, 9))
    k = int(rng.integers(1, 5))
    dim = latent + int(rng.integers(0, 3))
    bags = random_batch(rng, dim=dim)
    params = ModelParams.initialize(dim, latent, k, rng)
    rho = float(rng.uniform(0.2, 1.0))
    solver = solver or SolverConfig(tol=1e-10, max_iter=20000)
    _, grads, _ = batch_loss_and_grad(bags, params, rho, solver)
    flat = params.flatten()
    numeric = finite_diff_gradient(lambda x: batch_loss(bags, params.unflatten(x), rho, solver), flat, h)
    analytic = grads.flatten()
    scale = np.max(np.abs(numeric))
    rel = float(np.max(np.abs(analytic - numeric)) / scale)
    groups = {}
    num_p = params.unflatten(numeric).as_dict()
    for name, g in grads.as_dict().items():
        groups[name] = float(np.max(np.abs(g - num_p[name])) / max(np.max(np.abs(num_p[name])), 1e-6))
    return GradientCase(seed, rho, rel, groups)


def gradient_suite(n_cases: int = 10, seed: int = 0) -> list[GradientCase]:
    return [gradient_case(seed * 1000 + i) for i in range(n_cases)]
