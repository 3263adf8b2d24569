class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A model or experiment configuration is internally inconsistent."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericalError(ValueError):
    """Input contains values an op cannot handle (NaN)."""
