"""Quadratic BSDE solvers with constrained utility maximisation and theorem checks."""

from .config import ConfigError, config_hash
from .constraints import ConstraintSet, dist_sq, project
from .experiments import RunResult, run
from .generators import (
    GeneratorSpec,
    H1Certificate,
    H2Certificate,
    apriori_bounds,
    make_custom_generator,
    make_exponential_generator,
    make_log_generator,
    make_power_generator,
    make_quadratic_generator,
)
from .market import MarketModel, PathBundle, simulate_paths
from .maximize import (
    UtilitySpec,
    optimal_strategy,
    simulate_wealth,
    solve_utility,
    value_function,
    verify_R_process,
)
from .solver import (
    BSDEProblem,
    DiscreteSolution,
    PicardError,
    RegressionError,
    solve,
    solve_lattice,
    solve_regression,
)
from .transform import Eq2Problem, from_eq2_solution, inf_convolve, to_eq2
from .verify import THEOREM_IDS, TheoremReport, run_suite

__all__ = [
    "BSDEProblem",
    "ConfigError",
    "ConstraintSet",
    "DiscreteSolution",
    "Eq2Problem",
    "GeneratorSpec",
    "H1Certificate",
    "H2Certificate",
    "MarketModel",
    "PathBundle",
    "PicardError",
    "RegressionError",
    "RunResult",
    "THEOREM_IDS",
    "TheoremReport",
    "UtilitySpec",
    "apriori_bounds",
    "config_hash",
    "dist_sq",
    "from_eq2_solution",
    "inf_convolve",
    "make_custom_generator",
    "make_exponential_generator",
    "make_log_generator",
    "make_power_generator",
    "make_quadratic_generator",
    "optimal_strategy",
    "project",
    "run",
    "run_suite",
    "simulate_paths",
    "simulate_wealth",
    "solve",
    "solve_lattice",
    "solve_regression",
    "solve_utility",
    "to_eq2",
    "value_function",
    "verify_R_process",
]

__version__ = "0.1.0"
