"""
Exception hierarchy shared by services and the CLI.

Services raise these; the CLI maps them to process exit codes.
"""
from typing import List, Optional


class DDSError(Exception):
    """Base class for all application errors"""
    exit_code = 1


class ConfigError(DDSError, ValueError):
    """Invalid or inconsistent configuration"""
    exit_code = 2


class InvalidInputError(DDSError, ValueError):
    """A domain precondition was violated by the caller's data"""
    exit_code = 2


class IncompatibleCheckpointError(InvalidInputError):
    """Trained models do not match the requested decomposition"""

    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"incompatible checkpoint: {detail}")

    def __reduce__(self):
        return type(self), (self.detail,)


class NumericalError(DDSError, ArithmeticError):
    """Non-finite values appeared during a computation"""
    exit_code = 3


class TrainingDivergedError(NumericalError):
    def __init__(self, last_finite_epoch: Optional[int], history: Optional[list] = None):
        self.last_finite_epoch = last_finite_epoch
        self.history = history or []
        super().__init__(
            f"training diverged (last finite epoch: {last_finite_epoch})"
        )

    def __reduce__(self):
        return type(self), (self.last_finite_epoch, self.history)


class DecompositionDivergedError(NumericalError):
    def __init__(self, trace: List[dict]):
        self.trace = trace
        super().__init__(f"decomposition diverged after {len(trace)} steps")

    def __reduce__(self):
        return type(self), (self.trace,)


class StorageError(DDSError, OSError):
    """Reading or writing an artifact failed"""
    exit_code = 4
