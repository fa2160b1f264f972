"""Exception hierarchy shared by every palmerlin module."""


class PalmerError(Exception):
    """Base class for all palmerlin errors."""


class IntegrationBudgetError(PalmerError):
    """The step budget ran out before the requested end time.

    The trajectory integrated so far is kept on ``partial``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DomainError(PalmerError, ValueError):
    """A function was evaluated outside its domain (non-finite value, x = 0, ...)."""

    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


class RangeError(PalmerError, ValueError):
    """Dense output requested outside the integrated span."""


class CapabilityError(PalmerError):
    """A system lacks a callback the operation needs (typically D2f)."""


class ValidationError(PalmerError, ValueError):
    """Parameters violate a constructor precondition."""


class PreconditionError(PalmerError, ValueError):
    """Inputs violate an operation precondition (e.g. g(t, 0) != 0)."""


class ConvergenceError(PalmerError):
    """A limit s -> -inf did not stabilise before the backward floor."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TruncationError(PalmerError):
    """The certified truncation point lies below the hard floor.

    ``result`` carries the best-effort value together with its honest tail bound.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class InversionError(PalmerError):
    """Newton / fixed-point inversion of H did not reach the residual target."""

    def __init__(self, message, x=None, residual=None):
        super().__init__(message)
        self.x = x
        self.residual = residual


class InconsistencyError(PalmerError):
    """Two independent numerical routes disagree beyond tolerance."""


class NotExponentiallyStableError(PalmerError):
    """Transition-matrix norms do not decay exponentially on the sample grid."""


class ConfigError(PalmerError, ValueError):
    """A run configuration could not be parsed or validated."""
