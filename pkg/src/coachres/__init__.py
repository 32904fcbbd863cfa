"""Coach assignment for group seat requests on a multi-leg train line."""

from .domain import (
    AssignmentPlan,
    Instance,
    Network,
    Request,
    RequestType,
    ResidualCapacity,
    Train,
    make_requests,
    validate_plan,
)
from .offline import packable, solve_offline, solve_offline_fcfs, solve_offline_lp
from .stochastic import ArrivalModel, solve_apriori, solve_fluid
from .data import builtin
from .policies import make_policy
from .sim import generate_instance, run_experiment, run_policy

__version__ = "0.1.0"

__all__ = [
    "AssignmentPlan",
    "Instance",
    "Network",
    "Request",
    "RequestType",
    "ResidualCapacity",
    "Train",
    "ArrivalModel",
    "make_requests",
    "validate_plan",
    "packable",
    "solve_offline",
    "solve_offline_fcfs",
    "solve_offline_lp",
    "solve_fluid",
    "solve_apriori",
    "builtin",
    "make_policy",
    "generate_instance",
    "run_policy",
    "run_experiment",
]
