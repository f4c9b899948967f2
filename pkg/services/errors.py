"""
Exception hierarchy shared by every service module.
"""
from typing import Optional, Sequence


class RetainError(Exception):
    """Base exception for the RETAIN toolkit"""
    pass


class DimensionError(RetainError, ValueError):
    """Raised when operand shapes do not line up"""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ArgumentError(RetainError, ValueError):
    """Raised when an operation precondition is violated"""
    pass


class TapeStateError(RetainError, RuntimeError):
    """Raised when a tape or trace is used in the wrong state"""
    pass


class NumericalError(RetainError, ArithmeticError):
    """Raised when a computation produces non-finite values"""
    pass


class TrainingDivergedError(NumericalError):
    """Raised when the training loss becomes non-finite"""

    def __init__(self, epoch: int, batch: int, max_grad_norm: float):
        self.epoch = epoch
        self.batch = batch
        self.max_grad_norm = max_grad_norm
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} "
            f"(max gradient norm {max_grad_norm:.6g})"
        )


class IntegrityError(RetainError):
    """Raised when a contribution decomposition does not reproduce the prediction"""
    pass


class UndefinedMetricError(RetainError, ValueError):
    """Raised when a metric is undefined for its input"""
    pass


class CohortConfigError(RetainError, ValueError):
    """Raised for invalid cohort generation settings"""
    pass


class RecordParseError(RetainError, ValueError):
    """Raised when a JSONL record cannot be parsed"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class StorageError(RetainError, OSError):
    """Base exception for storage operations"""
    pass
