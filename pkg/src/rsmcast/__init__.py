"""Precoder optimisation for joint unicast/multicast downlink transmission.

Three strategies are supported: rate-splitting (RS), multi-user linear
precoding (MU-LP) and superposition coding with SIC (SC-SIC). Each is solved by
alternating closed-form MMSE updates with a convex cone subproblem; the
``region`` module sweeps weights to trace rate regions.
"""
from .core import (
    ChannelSet,
    CommonRateAllocation,
    InvalidArgument,
    PrecoderMatrix,
    Scenario,
    ScenarioInfeasible,
    Solution,
    SolverFailure,
    Strategy,
)

__version__ = "0.1.0"

__all__ = [
    "ChannelSet",
    "CommonRateAllocation",
    "InvalidArgument",
    "PrecoderMatrix",
    "Scenario",
    "ScenarioInfeasible",
    "Solution",
    "SolverFailure",
    "Strategy",
    "__version__",
]
