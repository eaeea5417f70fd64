"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an argument contract (range, count, missing piece)."""


class FormatError(ValueError):
    """A serialized file is malformed (bad magic, truncation, inconsistent header)."""


class ConfigError(ValueError):
    """A run configuration is invalid or inconsistent with the artifacts it references."""
