"""Exception families shared across widthlab modules.

Validation errors subclass ValueError and map to CLI exit code 1.
Numerical failures subclass NumericalError and map to exit code 2.
"""
from typing import Optional


class ProgramError(ValueError):
    """Raised when a program description or program transform is invalid."""
    pass


class UndefinedSymbol(ProgramError):
    """Raised when an instruction references a symbol that is not yet defined."""
    pass


class DuplicateSymbol(ProgramError):
    """Raised when a symbol name is defined twice."""
    pass


class ArityMismatch(ProgramError):
    """Raised when an OuterNonlin argument list disagrees with its function."""
    pass


class KindMismatch(ProgramError):
    """Raised when a symbol of the wrong kind is used (e.g. a vector as a matrix)."""
    pass


class MissingPartial(ProgramError):
    """Raised when a function without partial derivatives has to be differentiated."""
    pass


class EmptyOutputs(ProgramError):
    """Raised when a total program is requested without outputs."""
    pass


class ConfigError(ValueError):
    """Raised when an experiment config is malformed."""
    pass


class NumericalError(ArithmeticError):
    """Base class for numerical failures during execution or training."""
    pass


class NumericalOverflow(NumericalError):
    """Raised when a program instruction produces a non-finite value."""

    def __init__(self, index: int, detail: str = ""):
        self.index = index
        message = f"non-finite value at instruction {index}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class Diverged(NumericalError):
    """Raised when a network output exceeds the divergence threshold."""

    def __init__(self, step: int, value: Optional[float] = None):
        self.step = step
        self.value = value
        super().__init__(f"training diverged at step {step} (|f| = {value:.3g})"
                         if value is not None else f"training diverged at step {step}")


class CovarianceError(NumericalError):
    """Raised when a hat-ket covariance is not positive semi-definite."""
    pass


class ZeroNormUpdate(NumericalError):
    """Raised when an update has to be normalized by a zero norm."""
    pass


class NonFiniteHistory(NumericalError):
    """Raised when a gradient history passed to an update rule contains NaN."""
    pass
