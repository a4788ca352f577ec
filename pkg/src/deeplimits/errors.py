"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class DeepLimitsError(Exception):
    exit_code = 1


class InvalidConfig(DeepLimitsError):
    exit_code = 2


class InvariantViolation(DeepLimitsError):
    exit_code = 3


class IoError(DeepLimitsError):
    exit_code = 4


# configuration / input errors
class InvalidParameter(InvalidConfig):
    pass


class DimensionMismatch(InvalidConfig):
    pass


class TooLarge(InvalidConfig):
    pass


class Unsupported(InvalidConfig):
    pass


class UnknownExperiment(InvalidConfig):
    pass


class MissingField(InvalidConfig):
    pass


class BudgetExceeded(InvalidConfig):
    pass


class EncodingDegenerate(InvalidConfig):
    pass


# invariant breakage detected at run time
class CycleDetected(InvariantViolation):
    pass


class NonFinite(InvariantViolation):
    pass


class ToleranceExceeded(InvariantViolation):
    pass


class RangeViolation(InvariantViolation):
    def __init__(self, message, gadget=None, step=None):
        super().__init__(message)
        self.gadget = gadget
        self.step = step


class WiringError(InvariantViolation):
    pass


class SchemaMismatch(IoError):
    pass
