"""Exception types shared across the package."""


class DkgpError(Exception):
    """Base class for all errors raised by dkgp."""


class ShapeMismatch(DkgpError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class NonSquare(DkgpError, ValueError):
    pass


class NonSymmetric(DkgpError, ValueError):
    pass


class NotPositiveDefinite(DkgpError, ArithmeticError):
    pass


class NoConvergence(DkgpError, ArithmeticError):
    """An iterative method ran out of iterations.

    Carries the number of iterations performed and the final relative
    residual so callers can decide whether the result is usable anyway.
    """

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NotScalar(DkgpError, ValueError):
    pass


class InvalidKnots(DkgpError, ValueError):
    pass


class TooManyDims(DkgpError, ValueError):
    pass


class EmptyGrid(DkgpError, ValueError):
    pass


class RankTooLarge(DkgpError, ValueError):
    pass


class ParseError(DkgpError, ValueError):
    pass


class RaggedRows(ParseError):
    pass


class EmptyFile(ParseError):
    pass


class TooFewRows(DkgpError, ValueError):
    pass


class NonFiniteLoss(DkgpError, ArithmeticError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class UnknownModel(DkgpError, ValueError):
    pass


class ConfigError(DkgpError, ValueError):
    pass
