"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """Tensor, matrix or layer shapes do not agree."""

    def __init__(self, message: str, layer_index: int | None = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class InfeasibleBudget(RuntimeError):
    """No partition of a layer fits into the requested secure-memory budget."""

    def __init__(self, message: str, required_bytes: int = 0, budget_bytes: int = 0):
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes
        super().__init__(message)


class BoundsError(IndexError):
    """Access outside a registered enclave buffer."""


class CodecError(ValueError):
    """Malformed weight blob or codec mismatch."""


class ModelFormatError(ValueError):
    """A model description file could not be parsed."""
