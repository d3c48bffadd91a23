"""Exception types shared across the package."""


class ComposeError(Exception):
    """Base class for all package errors."""


class DimensionError(ComposeError, ValueError):
    """Shapes or dimensions do not line up."""


class ParameterError(ComposeError, ValueError):
    """An argument is outside its valid range."""


class EvaluationError(ComposeError, ArithmeticError):
    """A function produced a non-finite value."""


class NumericError(EvaluationError):
    """Training produced a non-finite loss."""


class CapacityError(ComposeError):
    """Assets cannot be packed onto the canvas."""


class BindingError(ComposeError):
    """An asset selected for binding has no phrase."""


class ModeError(ComposeError, ValueError):
    """Conditioning channels do not match the model mode."""
