"""Exception types shared across the package."""


class FdsimError(Exception):
    """Base class for all package errors."""


class DomainError(FdsimError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class SingularityError(FdsimError, ArithmeticError):
    """A state-dependent denominator or log argument became degenerate."""


class ConfigError(FdsimError, ValueError):
    """A scenario/config file is malformed or inconsistent."""


class TraceFormatError(FdsimError, ValueError):
    """A trace is missing required columns or is empty."""


class IntegrationFault(FdsimError, RuntimeError):
    """The integrator produced a non-finite state; carries a diagnostic dump."""

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state
