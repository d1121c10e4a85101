"""
Exception hierarchy shared by every module.

Failures are classified by type: validation problems (bad inputs, exit
code 2 at the command line) and numerical problems (non-finite arithmetic,
exit code 1).
"""

from typing import Optional


class DeepFactorError(Exception):
    """Base class for all library errors."""

    @property
    def error_type(self) -> str:
        return type(self).__name__


class ValidationError(DeepFactorError, ValueError):
    """Input does not satisfy an operation's preconditions."""


class DimensionMismatchError(ValidationError):
    """Array shapes do not chain through the network."""

    def __init__(self, message: str, layer: Optional[int] = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class UnsupportedArchitectureError(ValidationError):
    """Operation is not defined for this network architecture."""


class NonDifferentiableActivationError(UnsupportedArchitectureError):
    """A layer's activation lacks the derivatives an operation needs."""


class PanelFormatError(ValidationError):
    """CSV input (panel, dataset or benchmark) violates its schema."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InsufficientWindowsError(ValidationError):
    """Too few dates to estimate a statistic."""


class NumericalError(DeepFactorError, ArithmeticError):
    """Non-finite value produced during computation."""


class TrainingDivergedError(NumericalError):
    """Training produced a non-finite loss or gradient."""

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
        last_finite_epoch: Optional[int] = None,
    ):
        context = []
        if epoch is not None:
            context.append(f"epoch {epoch}")
        if batch is not None:
            context.append(f"batch {batch}")
        if last_finite_epoch is not None:
            context.append(f"last finite epoch {last_finite_epoch}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.last_finite_epoch = last_finite_epoch
