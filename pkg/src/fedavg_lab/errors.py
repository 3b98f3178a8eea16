"""Exception hierarchy. Every error raised by the package derives from FedAvgLabError."""

from __future__ import annotations


class FedAvgLabError(Exception):
    pass


class DimensionError(FedAvgLabError, ValueError):
    pass


class NumericError(FedAvgLabError, ArithmeticError):
    pass


class PartitionError(FedAvgLabError, ValueError):
    pass


class ProbeError(FedAvgLabError):
    pass


class PlanError(FedAvgLabError):
    pass


class MonitorError(FedAvgLabError):
    pass


class ConfigError(FedAvgLabError, ValueError):
    pass


class DivergenceError(NumericError):
    """A local or global iterate stopped being finite."""

    def __init__(self, message: str, client: int | None = None, round: int | None = None, step: int | None = None):
        where = ", ".join(
            f"{name}={value}" for name, value in (("client", client), ("round", round), ("step", step)) if value is not None
        )
        super().__init__(f"{message} ({where})" if where else message)
        self.client = client
        self.round = round
        self.step = step
