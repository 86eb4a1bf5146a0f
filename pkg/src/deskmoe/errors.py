"""Typed errors. Each carries the CLI exit code it maps to."""

from __future__ import annotations


class DeskMoeError(Exception):
    exit_code = 1
    remedy = ""

    def __init__(self, message: str, remedy: str | None = None):
        super().__init__(message)
        if remedy is not None:
            self.remedy = remedy

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{msg} ({self.remedy})" if self.remedy else msg


class ConfigError(DeskMoeError, ValueError):
    """Invalid configuration, preset, manifest or parameter value."""

    exit_code = 2
    remedy = "check the config file and --override values"


class ParameterError(ConfigError):
    """An argument to an operation is outside its documented domain."""

    remedy = ""


class ShapeError(DeskMoeError, ValueError):
    exit_code = 2


class RangeError(DeskMoeError, IndexError):
    exit_code = 2


class NumericError(DeskMoeError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 3


class NumericAbort(NumericError):
    """Training stopped because the loss or a gradient went non-finite."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        remedy = (
            f"last good checkpoint: {last_checkpoint}" if last_checkpoint else "no checkpoint written yet"
        )
        super().__init__(message, remedy)
        self.last_checkpoint = last_checkpoint


class ConsistencyError(DeskMoeError, ValueError):
    exit_code = 2


class AlignmentError(DeskMoeError, ValueError):
    """Two routing logs do not cover the same token stream."""

    exit_code = 2


class SchemaError(DeskMoeError, ValueError):
    exit_code = 4
    remedy = "regenerate the file with this version of deskmoe"


class CheckpointError(SchemaError):
    pass


class StorageError(DeskMoeError, OSError):
    exit_code = 4
