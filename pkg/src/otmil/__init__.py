"""Optimal-transport multiple-instance survival models on feature bags."""

from .ot_core import (
    OtProblem,
    TransportPlan,
    build_augmented,
    entropic_objective,
    solve_heterogeneity_ot,
    solve_semi_relaxed,
)
from .survival import Cohort, c_index, km_curve, log_rank_test, stratify_by_median

__version__ = "0.1.0"

__all__ = [
    "Cohort",
    "OtProblem",
    "TransportPlan",
    "build_augmented",
    "c_index",
    "entropic_objective",
    "km_curve",
    "log_rank_test",
    "solve_heterogeneity_ot",
    "solve_semi_relaxed",
    "stratify_by_median",
]
