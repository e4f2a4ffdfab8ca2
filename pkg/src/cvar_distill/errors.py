"""Exception hierarchy shared by every module.

The CLI maps each family onto its own exit code, so raise the most specific
class that applies.
"""


class CvarDistillError(Exception):
    """Base class for all package errors."""


class ConfigError(CvarDistillError, ValueError):
    """Missing key, bad type or schema violation in a run configuration."""


class DataError(CvarDistillError, ValueError):
    """Input data violates a panel contract."""


class AlignmentError(DataError):
    pass


class DomainError(DataError):
    pass


class EmptyUniverseError(DataError):
    pass


class DiagnosticError(DataError):
    pass


class NumericalError(CvarDistillError, ArithmeticError):
    """A numerical routine failed (singular fit, divergence, infeasibility)."""


class FitError(NumericalError):
    pass


class NonStationaryError(NumericalError):
    pass


class InfeasibleError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class StaleTapeError(CvarDistillError, RuntimeError):
    """Backward pass requested on a tape recorded before a parameter update."""


class SkipDate(CvarDistillError):
    """A feature date cannot be built; carries the reason, never a partial row."""

    def __init__(self, date_index, reason):
        super().__init__(f"date index {date_index}: {reason}")
        self.date_index = date_index
        self.reason = reason
