"""Exception hierarchy shared by every salnet module."""


class SalnetError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(SalnetError, ValueError):
    """Tensor extents disagree with what a layer or file expects."""


class ConfigError(SalnetError, ValueError):
    """A layer, network or run configuration is invalid."""


class DataError(SalnetError, OSError):
    """A dataset file is missing, unreadable or inconsistent."""


class FormatError(SalnetError, ValueError):
    """A model or spec file is corrupt or has the wrong magic/version."""


class DivergenceError(SalnetError, ArithmeticError):
    """Training produced a non-finite loss or update."""

    def __init__(self, message, iteration=None, block=None):
        super().__init__(message)
        self.iteration = iteration
        self.block = block
