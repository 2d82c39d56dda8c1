"""Solvers and verification experiments for discounted stochastic teams with
finitely many symmetric agent clusters.

Modules:
  model      problem instances, measure algebra, JSON ingestion
  exact      brute-force joint dynamic programming and simulation oracle
  empirical  equivalent MDP on arrays of per-cluster count vectors
  meanfield  deterministic mean-field MDP on simplex grids
  induction  decentralized policy induction, truncation, representative team
  verify     exchangeability/convergence property experiments
  cli        batch entry point
"""

__version__ = "0.1.0"

from .model import (
    BudgetExceededError,
    CostFamily,
    InstanceValidationError,
    KernelFamily,
    MeasureArray,
    PopulationLayout,
    TeamSpec,
    empirical_measure,
    ensemble_cost,
    eval_cost,
    eval_kernel,
    load_instance,
    save_instance,
    simplex_vector,
    spec_from_dict,
)
from .benchmarks import benchmark

__all__ = [
    "BudgetExceededError",
    "CostFamily",
    "InstanceValidationError",
    "KernelFamily",
    "MeasureArray",
    "PopulationLayout",
    "TeamSpec",
    "benchmark",
    "empirical_measure",
    "ensemble_cost",
    "eval_cost",
    "eval_kernel",
    "load_instance",
    "save_instance",
    "simplex_vector",
    "spec_from_dict",
    "__version__",
]
