"""Chance-constrained covariance steering with mixed-integer region assignment."""

from .environment import Scenario, builtin_scenario, load_scenario
from .policy import Policy
from .program import assemble
from .solver import SolveOptions, SolveResult, solve
from .verify import verify_policy

__all__ = [
    "Policy",
    "Scenario",
    "SolveOptions",
    "SolveResult",
    "assemble",
    "builtin_scenario",
    "load_scenario",
    "solve",
    "verify_policy",
]
__version__ = "0.1.0"
