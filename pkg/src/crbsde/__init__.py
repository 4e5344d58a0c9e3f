"""Doubly conditionally reflected BSDEs on finite scenario trees."""

from .analysis import LinearDriver, compare, gamma_process, saddle_audit, saddle_point, stopped_value
from .dynkin import coupled_families, game_value_bruteforce, game_value_recursive, reward_shift, snell_envelope
from .errors import (
    CapExceededError,
    ConfigError,
    CRBSDEError,
    NumericalError,
    PreconditionError,
)
from .estimators import ConditionalReflectedBSDE, SkorokhodReflector, SwitchingStrategy
from .finprob import (
    ScenarioTree,
    SubFiltration,
    cond_expect_F,
    cond_expect_G,
    enumerate_stopping_times,
    martingale_coeff,
)
from .skorokhod import iterative_oracle, k_from_solution, stability_gap, two_sided_map
from .solver import (
    ConstantDriver,
    DCRBSDEProblem,
    FunctionDriver,
    SolutionTriple,
    penalization_sweep,
    solve,
    solve_backward,
    solve_constant_driver,
    solve_penalized,
    solve_picard,
    stability_estimate,
    verify_solution,
)
from .switching import SwitchingProblem, decompose, enumerate_strategies, optimal_strategy, profit

__version__ = "0.1.0"
