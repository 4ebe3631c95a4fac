"""Exception hierarchy shared by every pcde module."""


class PcdeError(Exception):
    """Base class for all pcde errors."""


class DomainError(PcdeError, ValueError):
    """A point or parameter lies outside the domain an operation accepts."""


class ContractError(PcdeError, ValueError):
    """A documented precondition of an operation does not hold."""


class ResourceBudgetError(PcdeError, RuntimeError):
    """An enumeration or search exceeded its configured budget.

    ``partial`` carries whatever was computed before the budget ran out
    (for instance a partial selection report), or ``None``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DegenerateFitError(PcdeError, ArithmeticError):
    """A mixture component collapsed during fitting."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class CalibrationError(PcdeError, ValueError):
    """The slope heuristic could not be calibrated on the given models."""


class SamplerError(PcdeError, RuntimeError):
    """Rejection sampling would be too inefficient to be trusted."""


class SelectionError(PcdeError, RuntimeError):
    """Every candidate model of a selection run failed."""
