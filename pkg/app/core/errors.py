"""Exception hierarchy for the SDF toolkit.

Every error carries the process exit code the command line reports for it.
"""
from typing import Any, Optional


class SdfToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1


class ConfigError(SdfToolkitError):
    """Invalid run configuration or split ranges."""

    exit_code = 1


class DataError(SdfToolkitError):
    """Malformed or insufficient input data."""

    exit_code = 2


class ShapeError(DataError, ValueError):
    """Operand shapes do not conform."""

    def __init__(self, op: str, *shapes: Any):
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {rendered}")
        self.op = op
        self.shapes = shapes


class CheckpointError(DataError):
    """Checkpoint cannot be read or does not match the run."""


class NumericalError(SdfToolkitError):
    """Non-finite values, divergence or degenerate statistics."""

    exit_code = 3

    def __init__(self, message: str, last_good: Optional[Any] = None):
        super().__init__(message)
        self.last_good = last_good


class MetricError(NumericalError):
    """An evaluation metric is undefined for the given inputs."""
