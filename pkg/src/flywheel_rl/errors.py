"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class FlywheelError(Exception):
    """Base class for all package errors."""


class ContractViolation(FlywheelError, ValueError):
    """An operation was called outside its precondition."""


class NumericalError(FlywheelError, FloatingPointError):
    """NaN/Inf encountered where a finite value is required."""


class GenerationExhausted(FlywheelError):
    """Rejection sampling for a feasible environment ran out of attempts."""


class Infeasible(FlywheelError):
    """No collision-free path exists between two points."""


class DemoCollectionFailed(FlywheelError):
    """The expert could not produce the requested successful demonstrations."""


class DemoFormatError(FlywheelError, ValueError):
    """A demonstration carries malformed fields (e.g. out-of-range actions)."""


class FileFormatError(FlywheelError, ValueError):
    """A line of an input file could not be parsed; the message names file and line."""


class TeacherTooWeak(FlywheelError):
    """A teacher failed to reach the per-environment success quota."""

    def __init__(self, env_id: str, success_rate: float):
        super().__init__(f"teacher too weak on {env_id}: success rate {success_rate:.3f}")
        self.env_id = env_id
        self.success_rate = success_rate


class ZeroShotTooWeak(FlywheelError):
    """The generalist produced no successes on the target environment."""


class ConfigError(FlywheelError, ValueError):
    """Malformed configuration or unknown key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
