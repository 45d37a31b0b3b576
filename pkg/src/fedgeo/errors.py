"""Exception hierarchy shared by all fedgeo modules."""
from __future__ import annotations


class FedGeoError(Exception):
    """Base class for all errors raised by fedgeo."""


class ContractError(FedGeoError, ValueError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Operand shapes are not conformable; message names both shapes."""

    def __init__(self, op: str, left, right):
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class DomainError(ContractError):
    """A numeric argument lies outside the operation's domain."""


class ParseError(FedGeoError, ValueError):
    """Malformed external input; carries the offending row/key when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericError(FedGeoError, ArithmeticError):
    """An iterative or floating-point computation failed to produce a usable result."""

    def __init__(self, message: str, iterations: int | None = None):
        self.iterations = iterations
        if iterations is not None:
            message = f"{message} (after {iterations} iterations)"
        super().__init__(message)
