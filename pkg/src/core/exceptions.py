"""
Exception hierarchy for the SPI engine.
"""

from typing import Any, Dict, Optional


class SpiError(Exception):
    """Base class for every engine error"""
    pass


class InvalidInput(SpiError):
    """Non-finite or otherwise unusable numeric input"""
    pass


class InvalidTemperature(SpiError):
    """Temperature must be strictly positive"""
    pass


class NumericalError(SpiError):
    """Training stopped being numerically sound; `located` pins it to an epoch and iteration"""

    def __init__(self, message: str, epoch: Optional[int] = None, iteration: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch
        self.iteration = iteration

    def located(self, epoch: int, iteration: int) -> 'NumericalError':
        return type(self)(f"at epoch {epoch}, iteration {iteration}: {self}", epoch=epoch, iteration=iteration)

    def diagnostics(self) -> Dict[str, Any]:
        return {'epoch': self.epoch, 'iteration': self.iteration}


class DegenerateEmbedding(NumericalError):
    """Embedding norm is at or below the degenerate threshold"""
    pass


class ShapeMismatch(SpiError):
    pass


class InvalidK(SpiError):
    pass


class InvalidClass(SpiError):
    pass


class DegenerateBatch(NumericalError):
    """A contrastive anchor has no positive partner"""
    pass


class InvalidViewCount(SpiError):
    pass


class InvalidThreshold(SpiError):
    pass


class InconsistentState(SpiError):
    pass


class MissingClass(SpiError):
    pass


class EmptyUnlabeledSet(SpiError):
    pass


class InvalidEpoch(SpiError):
    pass


class EmptyTestSet(SpiError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    """Raised when the objective stops being finite; carries diagnostics"""

    def __init__(self, message: str, epoch: Optional[int] = None, iteration: Optional[int] = None,
                 parts: Optional[Dict[str, float]] = None):
        super().__init__(message, epoch, iteration)
        self.parts = parts or {}

    def located(self, epoch: int, iteration: int) -> 'NonFiniteLoss':
        return NonFiniteLoss(f"at epoch {epoch}, iteration {iteration}: {self}", epoch, iteration, self.parts)

    def diagnostics(self) -> Dict[str, Any]:
        return {'epoch': self.epoch, 'iteration': self.iteration, 'parts': dict(self.parts)}


class InvalidSpec(SpiError):
    """Invalid dataset or run parameters; `key` names the offending field"""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class StorageError(SpiError):
    pass


class ParseError(SpiError):
    """Malformed snapshot file"""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[str] = None):
        location = f"line {line}: " if line is not None else ""
        super().__init__(f"{location}{message}")
        self.line = line
        self.column = column


class GradientCheckFailure(SpiError):
    def __init__(self, loss_name: str, coordinate: Any, rel_error: float):
        super().__init__(f"{loss_name}: worst coordinate {coordinate} has relative error {rel_error:.3e}")
        self.loss_name = loss_name
        self.coordinate = coordinate
        self.rel_error = rel_error
