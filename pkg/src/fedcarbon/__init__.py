"""Carbon-aware federated learning simulator with gradient-norm client filtering."""

from .carbon import CarbonTrace, EmissionsLedger, load_trace, synth_trace
from .config import ExperimentPlan, parse_config, serialize_plan
from .errors import (
    ConfigurationError,
    FedCarbonError,
    IngestionError,
    InvariantViolation,
    NumericError,
    ShapeError,
)
from .experiment import RunSummary, run_plan
from .sim import STRATEGIES, RoundMetrics, SimConfig, Simulation, run_simulation

__all__ = [
    "CarbonTrace",
    "ConfigurationError",
    "EmissionsLedger",
    "ExperimentPlan",
    "FedCarbonError",
    "IngestionError",
    "InvariantViolation",
    "NumericError",
    "RoundMetrics",
    "RunSummary",
    "STRATEGIES",
    "ShapeError",
    "SimConfig",
    "Simulation",
    "load_trace",
    "parse_config",
    "run_plan",
    "run_simulation",
    "serialize_plan",
    "synth_trace",
]

__version__ = "0.1.0"
