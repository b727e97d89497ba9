class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class CapacityError(RuntimeError):
    """A sequence would exceed the model's ``max_seq``."""


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""
