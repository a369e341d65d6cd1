class StructuralError(ValueError):
    """Inputs violate a structural requirement (shapes, indices, sizes, levels)."""


class NumericError(ValueError):
    """Inputs contain non-finite or out-of-range numbers."""
