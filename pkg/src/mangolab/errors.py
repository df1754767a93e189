"""Exception types shared across the package."""


class MangoLabError(Exception):
    pass


class ShapeError(MangoLabError, ValueError):
    """Operand extents do not agree."""


class DomainError(MangoLabError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ContractError(MangoLabError, RuntimeError):
    """A precondition or postcondition of an operation was violated."""


class NumericFault(MangoLabError, FloatingPointError):
    """Non-finite value produced during training."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
