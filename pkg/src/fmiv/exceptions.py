"""Exception hierarchy shared by all modules."""


class FmivError(Exception):
    """Base class for package errors."""


class ValidationError(FmivError, ValueError):
    """Input data or arguments violate a documented precondition."""


class InfeasibleMatchError(FmivError):
    """No full match satisfies the requested constraints."""


class WeakInstrumentError(FmivError, ArithmeticError):
    """The instrument carries no information about the exposure."""


class DegenerateVarianceError(FmivError, ArithmeticError):
    """A variance estimate needed for a test is zero or undefined."""
