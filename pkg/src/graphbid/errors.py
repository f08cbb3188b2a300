"""Exception types shared across the package."""


class GraphbidError(Exception):
    """Base class for all package errors."""


class DimensionError(GraphbidError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(GraphbidError, ValueError):
    """A layer, schedule or experiment was configured with invalid values."""


class InputError(GraphbidError, ValueError):
    """An operation received data that violates its preconditions."""


class EvaluationError(GraphbidError, ArithmeticError):
    """A function evaluated to a non-finite value where a finite one is needed."""


class DependencyError(GraphbidError, RuntimeError):
    """A pipeline stage was started before the stage it depends on."""
