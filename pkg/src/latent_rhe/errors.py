"""Exception types shared across the package."""


class UsageError(ValueError):
    """An operation was called in a state or with arguments it does not accept."""


class ShapeError(ValueError):
    """Array shapes are incompatible."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class LayoutError(ValueError):
    """A grid layout violates its invariants."""


class UnreachableError(RuntimeError):
    """No path exists between two cells."""
