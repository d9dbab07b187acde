"""Exception hierarchy for the branching-field laboratory.

Every error carries the exit code of its family so the command line can map
failures to process status without inspecting messages.
"""


class BifieldError(Exception):
    """Base class for all errors raised by this package"""
    exit_code = 1


# Families

class UsageError(BifieldError):
    """Bad command-line usage or malformed configuration file"""
    exit_code = 2


class ValidationError(BifieldError, ValueError):
    """Inputs violate a model or configuration invariant"""
    exit_code = 3


class NumericalError(BifieldError, RuntimeError):
    """A numerical procedure could not deliver the requested accuracy"""
    exit_code = 4


class AcceptanceError(BifieldError, AssertionError):
    """A verified property failed on computed data"""
    exit_code = 5


# Usage

class ParseError(UsageError):
    def __init__(self, message: str, field: str = None, line: int = None):
        location = []
        if field:
            location.append(f"field '{field}'")
        if line is not None:
            location.append(f"line {line}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")
        self.field = field
        self.line = line


class ConfigError(UsageError):
    pass


# Validation

class AsymmetricSupport(ValidationError):
    pass


class ZeroDisplacement(ValidationError):
    pass


class NotNormalized(ValidationError):
    pass


class ReducibleSupport(ValidationError):
    pass


class InvalidStepDistribution(ValidationError):
    pass


class NotSubcritical(ValidationError):
    pass


class TailViolation(ValidationError):
    pass


class DivisionByZeroRate(ValidationError):
    pass


class InvalidSimConfig(ValidationError):
    pass


class BudgetExceeded(ValidationError):
    pass


class TableHorizonTooShort(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


class DegenerateSequence(ValidationError):
    pass


# Numerical

class QuadratureUnderResolved(NumericalError):
    pass


class DeadlockNoEvents(NumericalError):
    pass


class HorizonTooLarge(NumericalError):
    pass


class UnstableStep(NumericalError):
    pass


class NonPositiveDetected(NumericalError):
    pass


class NoConvergenceWithinBudget(NumericalError):
    pass


class TruncationTooCoarse(NumericalError):
    pass


# Acceptance

class BoundViolated(AcceptanceError):
    pass
