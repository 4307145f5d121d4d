"""Exception types shared across the package."""


class LptError(Exception):
    """Base class for every error raised by this package."""


class BadArgument(LptError, ValueError):
    pass


class NonFiniteLoss(LptError, FloatingPointError):
    """A loss, gradient or parameter entry became NaN or infinite."""


class NotDifferentiableTwice(LptError):
    """An operation in the graph has no differentiable backward rule."""


class DegenerateSplit(LptError, ValueError):
    pass


class DegenerateTest(LptError):
    """The soft test size (sum of selection weights) is numerically zero."""


class ZeroDirection(LptError):
    """A finite-difference direction has (near) zero norm."""


class IllConditioned(LptError, ValueError):
    pass


class ConfigError(LptError, ValueError):
    pass
