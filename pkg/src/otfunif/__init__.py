"""On-the-fly uniformization for time-inhomogeneous Markov population models.

Computes guaranteed lower bounds on the transient distribution of a
population model with infinitely many states.  Time is cut into windows;
inside each window the process is uniformized with an inhomogeneous Poisson
process whose rate dominates every state that can be reached, and the
transition probabilities are bounded from below.  All probability that is
not accounted for is booked as error, split by source.
"""

from .engine import ErrorLedger, SparseDistribution, UniformizationRate
from .model import (
    ModelError,
    ModelSpec,
    StateFactor,
    TimeFactor,
    TransitionClass,
    builtin_model,
    exclusive_switch,
    gene_expression,
    load_model,
    parse_model,
)
from .poisson import right_truncation, step_parameter, truncate, weights
from .stepper import RunResult, RunTimeout, choose_step, run

__all__ = [
    "ErrorLedger",
    "ModelError",
    "ModelSpec",
    "RunResult",
    "RunTimeout",
    "SparseDistribution",
    "StateFactor",
    "TimeFactor",
    "TransitionClass",
    "UniformizationRate",
    "builtin_model",
    "choose_step",
    "exclusive_switch",
    "gene_expression",
    "load_model",
    "parse_model",
    "right_truncation",
    "run",
    "step_parameter",
    "truncate",
    "weights",
]

__version__ = "0.1.0"
