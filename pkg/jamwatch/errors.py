"""Error hierarchy shared by every jamwatch module.

Each error can name the offending field so the CLI can print a single
machine-parsable line.
"""

from __future__ import annotations

from typing import Any, Optional


class JamwatchError(Exception):
    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.field = field

    def as_line(self) -> str:
        text = self.message.replace('"', "'").replace("\n", " ")
        return f'error kind={type(self).__name__} field={self.field or "-"} message="{text}"'


class ConfigurationError(JamwatchError, ValueError):
    pass


class ArgumentError(JamwatchError, ValueError):
    pass


class LengthError(JamwatchError, ValueError):
    def __init__(self, message: str, required: int, field: Optional[str] = None):
        super().__init__(message, field)
        self.required = required


class StateError(JamwatchError, RuntimeError):
    pass


class FormatError(JamwatchError):
    pass


class ShapeError(JamwatchError, ValueError):
    def __init__(self, message: str, layer_index: Optional[int] = None, field: Optional[str] = None):
        super().__init__(message, field)
        self.layer_index = layer_index


class ConstructionError(ShapeError):
    pass


class TrainingError(JamwatchError, RuntimeError):
    def __init__(self, message: str, epoch: Optional[int] = None, field: Optional[str] = None):
        super().__init__(message, field)
        self.epoch = epoch


class SourceExhaustedError(JamwatchError):
    def __init__(self, message: str, completed: list[Any]):
        super().__init__(message, field="trials")
        self.completed = completed


def error_line(exc: BaseException, field: Optional[str] = None) -> str:
    """Single machine-parsable line for any error the CLI reports."""
    if isinstance(exc, JamwatchError):
        return exc.as_line()
    if isinstance(exc, OSError) and field is None:
        field = "path"
    text = str(exc).replace('"', "'").replace("\n", " ")
    return f'error kind={type(exc).__name__} field={field or "-"} message="{text}"'
