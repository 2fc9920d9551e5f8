"""Exception types shared across the package."""


class PamlabError(Exception):
    """Base class for all package errors."""


class NumericalFailure(PamlabError):
    """A computation finished but its result cannot be trusted (CLI exit code 3)."""


class SolvabilityError(PamlabError, ValueError):
    """The rate equation ``log(v)/v = c`` has no root above e."""

    def __init__(self, message, c=None, min_N=None):
        super().__init__(message)
        self.c = c
        self.min_N = min_N


class SingularityError(PamlabError, ValueError):
    """A singular kernel would be evaluated at the origin."""


class DegenerateWeights(NumericalFailure):
    """One Monte Carlo sample carries almost all of the exponential weight."""

    def __init__(self, message, max_weight_fraction=None):
        super().__init__(message)
        self.max_weight_fraction = max_weight_fraction


class NotConverged(NumericalFailure):
    """An iterative solver stopped before meeting its tolerance.

    The best iterate found so far is attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class CoverageError(NumericalFailure):
    """Too many Brownian path points left the sampled field grid."""


class QuadratureError(NumericalFailure):
    """Adaptive quadrature failed to reach the requested tolerance."""


class Unsupported(PamlabError, NotImplementedError):
    """The operation is not defined for this kernel or configuration."""


class ConfigError(PamlabError, ValueError):
    """Invalid run configuration (CLI exit code 2)."""
