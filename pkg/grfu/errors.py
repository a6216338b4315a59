"""
Exception types shared across the grfu package.
Each one also derives from the builtin the caller would naturally catch.
"""

from typing import Optional


class GrfuError(Exception):
    """Base class for all grfu errors."""


class ContractError(GrfuError, ValueError):
    """A documented precondition was violated."""


class DimensionError(ContractError):
    """Tensor shapes do not agree."""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class EvaluationError(GrfuError, RuntimeError):
    """A function produced a non-finite value."""


class TrainingError(GrfuError, RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message: str, parameter: Optional[str] = None,
                 epoch: Optional[int] = None, batch: Optional[int] = None):
        super().__init__(message)
        self.parameter = parameter
        self.epoch = epoch
        self.batch = batch


class LoadError(GrfuError, ValueError):
    """A checkpoint or dataset file is malformed."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class ConfigError(GrfuError, ValueError):
    """An experiment config is missing a key or holds an invalid value."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key
