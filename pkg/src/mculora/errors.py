"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor/array dimensions are incompatible with an operation."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition or state contract."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""
