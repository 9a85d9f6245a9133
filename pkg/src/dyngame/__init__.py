"""Nash equilibria and receding-horizon control for linear-quadratic dynamic games."""

__version__ = "0.1.0"

from .clne import ClNeSolution, solve_clne
from .errors import (AssumptionError, ConvergenceError, DimensionError, DyngameError, InfeasibleError,
                     ResonanceError, ValidationError)
from .fhvi import FiniteHorizonVi, build_vi, diagnose_monotonicity, natural_residual, solve_vi
from .game_model import (ConstraintSpec, GameDefinition, TrajectoryLog, build_platooning, feasible,
                         load_scenario, propagate, stage_cost)
from .matrix_eq import solve_dare, solve_dlyap, solve_stein, solve_sylvester_stein
from .olne import AugmentedCostToGo, OlNeSolution, build_cost_to_go, check_assumptions, solve_olne
from .rhc import PerturbationConfig, RhcConfig, run_perturbation_experiment, run_rhc
from .terminal_set import TerminalSet, compute_terminal_set, membership

__all__ = [
    "AssumptionError", "AugmentedCostToGo", "ClNeSolution", "ConstraintSpec", "ConvergenceError",
    "DimensionError", "DyngameError", "FiniteHorizonVi", "GameDefinition", "InfeasibleError",
    "OlNeSolution", "PerturbationConfig", "ResonanceError", "RhcConfig", "TerminalSet", "TrajectoryLog",
    "ValidationError", "build_cost_to_go", "build_platooning", "build_vi", "check_assumptions",
    "compute_terminal_set", "diagnose_monotonicity", "feasible", "load_scenario", "membership",
    "natural_residual", "propagate", "run_perturbation_experiment", "run_rhc", "solve_clne", "solve_dare",
    "solve_dlyap", "solve_olne", "solve_stein", "solve_sylvester_stein", "solve_vi", "stage_cost",
]
