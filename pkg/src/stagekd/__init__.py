"""Staged CNN training with rotation-pretext auxiliary heads and
hierarchical probabilistic distillation."""

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    ShapeMismatchError,
)
from .tensor import (
    Parameter,
    Tensor,
    apply_primitive,
    backward,
    clear_tape,
    no_grad,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "FormatError",
    "NumericError",
    "ShapeMismatchError",
    "Parameter",
    "Tensor",
    "apply_primitive",
    "backward",
    "clear_tape",
    "no_grad",
]

__version__ = "0.1.0"
