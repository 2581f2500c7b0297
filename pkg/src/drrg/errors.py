"""Exception hierarchy shared by every stage of the pipeline."""


class DrrgError(Exception):
    """Base class for all package errors."""


class ContractError(DrrgError, ValueError):
    """A caller violated a precondition (bad argument, missing artifact, ...)."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericDomainError(DrrgError, ArithmeticError):
    """Non-finite values reached an operation that cannot accept them."""


class TrainingError(DrrgError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class ArtifactIOError(DrrgError, OSError):
    """Reading or writing an on-disk artifact failed."""
