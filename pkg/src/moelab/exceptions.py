"""Error types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """An operation received or would produce invalid numeric values."""


class UsageError(ValueError):
    """An operation was called outside its contract."""


class TrainingError(RuntimeError):
    """Training diverged or otherwise failed; message carries diagnostics."""
