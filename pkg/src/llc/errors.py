"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class StateError(RuntimeError):
    """An object is used in a state that does not allow the operation."""


class FormatError(ValueError):
    """A dataset or architecture file is malformed."""


class NumericError(ArithmeticError):
    """A loss became non-finite during optimisation."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DiagnosticError(ValueError):
    """A diagnostic cannot be computed for the given input."""


class EnumerationCapError(ValueError):
    """The architecture space is larger than the configured cap."""

    def __init__(self, count, cap):
        super().__init__(f"search space has {count} architectures, cap is {cap}")
        self.count = count
        self.cap = cap
