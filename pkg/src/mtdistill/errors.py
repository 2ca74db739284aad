"""Exception types shared across the package."""


class MTDistillError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MTDistillError, ValueError):
    """Operand shapes are incompatible (broadcast, matmul, axis, ...)."""


class ConfigError(MTDistillError, ValueError):
    """A configuration value is outside its documented range."""


class DataError(MTDistillError, ValueError):
    """Input data violates a precondition (bad label, malformed row, ...)."""


class ContractError(MTDistillError, RuntimeError):
    """An API contract was violated (non-scalar loss, reused tape, ...)."""
