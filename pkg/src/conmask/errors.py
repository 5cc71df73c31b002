"""Exception hierarchy shared across the package."""


class ConMaskError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(ConMaskError, ValueError):
    """Operands have incompatible or invalid shapes."""


class DataError(ConMaskError):
    """Malformed or inconsistent input data (files, graphs, vocabularies)."""


class StateError(ConMaskError):
    """An operation was called before its required state existed."""


class NumericalError(ConMaskError, ArithmeticError):
    """A computation produced NaN/inf or otherwise failed numerically."""
