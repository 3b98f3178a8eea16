"""FedAvg under semi-smoothness: probes, planner, engine and bound monitor."""

from fedavg_lab.errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    FedAvgLabError,
    MonitorError,
    NumericError,
    PartitionError,
    PlanError,
    ProbeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "FedAvgLabError",
    "MonitorError",
    "NumericError",
    "PartitionError",
    "PlanError",
    "ProbeError",
]
