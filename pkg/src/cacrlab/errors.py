"""Exception types raised across the package."""


class CacrError(Exception):
    """Base class for all package errors."""


class ZeroNorm(CacrError, ArithmeticError):
    pass


class DimMismatch(CacrError, ValueError):
    pass


class ShapeMismatch(DimMismatch):
    pass


class EmptyNegativeSupport(CacrError, ValueError):
    pass


class KMismatch(CacrError, ValueError):
    pass


class DatasetTooSmall(CacrError, ValueError):
    pass


class LabelMismatch(CacrError, ValueError):
    pass


class EmptyValidation(CacrError, ValueError):
    pass


class CollapseDetected(CacrError, RuntimeError):
    """The encoder mapped an input to the zero vector before normalization."""


class NonFiniteLoss(CacrError, FloatingPointError):
    pass


class ConfigError(CacrError, ValueError):
    pass


class ChecksumMismatch(CacrError, IOError):
    pass
