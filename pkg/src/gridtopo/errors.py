"""Exception hierarchy shared by all estimators."""


class GridTopoError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(GridTopoError, ValueError):
    """Input graph is not a valid radial feeder (cycle, disconnected, bad index)."""


class RankDeficiencyError(GridTopoError, ValueError):
    """Data matrix does not have the rank an estimator needs."""

    def __init__(self, message, rank=None, required=None):
        super().__init__(message)
        self.rank = rank
        self.required = required


class InsufficientDataError(GridTopoError, ValueError):
    """Too few samples for the requested statistic."""


class NumericalError(GridTopoError, ArithmeticError):
    """Singular or ill-conditioned block encountered."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class EnumerationCapError(GridTopoError, RuntimeError):
    """Spanning-tree enumeration would exceed the configured cap."""

    def __init__(self, message, count=None, cap=None):
        super().__init__(message)
        self.count = count
        self.cap = cap


class ReconstructionError(GridTopoError, RuntimeError):
    """Distances are not consistent with a tree within tolerance."""

    def __init__(self, message, quadruple=None, violation=None, tree=None):
        super().__init__(message)
        self.quadruple = quadruple
        self.violation = violation
        self.tree = tree


class ConvergenceError(GridTopoError, RuntimeError):
    """Iterative solver hit its iteration cap."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic


class DegenerateProbingError(GridTopoError, ValueError):
    """Probing magnitudes are all zero."""


class ConfigError(GridTopoError, ValueError):
    """Experiment configuration is invalid."""
