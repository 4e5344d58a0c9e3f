"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CRBSDEError(Exception):
    exit_code = 1


class ConfigError(CRBSDEError, ValueError):
    exit_code = 2


class ExpressionError(ConfigError):
    """Raised for malformed driver/obstacle expressions; ``position`` is a 0-based column."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class PreconditionError(CRBSDEError, ValueError):
    exit_code = 3


class InvalidTreeError(PreconditionError):
    pass


class InvalidFiltrationError(PreconditionError):
    pass


class InvalidBarriersError(PreconditionError):
    pass


class NumericalError(CRBSDEError, ArithmeticError):
    exit_code = 4


class RepresentationError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    pass


class NonContractionError(NonConvergenceError):
    pass


class DivergenceError(NonConvergenceError):
    pass


class DegenerateExponentialError(NumericalError):
    pass


class NotASolutionError(NumericalError):
    pass


class CapExceededError(CRBSDEError, RuntimeError):
    exit_code = 5


class EnumerationTooLargeError(CapExceededError):
    def __init__(self, count, cap):
        self.count = count
        self.cap = cap
        super().__init__(f"enumeration would produce {count} items, above the cap of {cap}")
