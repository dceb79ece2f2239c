"""Exception and warning types raised by the engine."""


class MargquadError(Exception):
    """Base class for all engine errors."""


class ValidationError(MargquadError, ValueError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFinite(ValidationError):
    pass


class NonPositiveScale(ValidationError):
    pass


class ImproperPosterior(MargquadError):
    """Raised when the marginal integral diverges (e.g. y identically zero)."""


class InvalidInterval(MargquadError, ValueError):
    pass


class BisectionFailure(MargquadError):
    pass


class EigenFailure(MargquadError):
    pass


class SingularMatrix(MargquadError):
    pass


class NonPositiveVariance(MargquadError):
    pass


class GridTooCoarse(MargquadError):
    pass


class MissingCovariance(MargquadError, KeyError):
    pass


class RankDeficiencyWarning(UserWarning):
    pass


class NoConvergence(UserWarning):
    """Adaptive refinement hit its node cap before meeting the tolerance."""
