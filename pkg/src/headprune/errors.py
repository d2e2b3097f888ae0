"""Exception types shared across the package.

Each maps to a CLI exit code (see ``headprune.cli``).
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """NaN/inf where a finite value is required."""


class ScheduleError(ValueError):
    """Step index outside the schedule's range."""


class GranularityError(ValueError):
    """Sparsity not representable as a whole number of pruned heads."""


class GateStateError(RuntimeError):
    """Gate operation requested in an incompatible mode."""


class DataError(ValueError):
    """Corpus or split unusable (empty, too short)."""


class EquivalenceError(RuntimeError):
    """Pruned and gated models disagree beyond tolerance."""
