from __future__ import annotations

from typing import ClassVar


class SamPeftError(Exception):
    """Base class; `exit_code` is what the CLI returns when this escapes a command."""

    exit_code: ClassVar[int] = 1


class ConfigError(SamPeftError, ValueError):
    exit_code = 2


class DataError(SamPeftError):
    exit_code = 3


class NumericalError(SamPeftError):
    exit_code = 4


class ShapeError(SamPeftError, ValueError):
    # Same code as ConfigError; 4 is kept for numerical and tape failures.
    exit_code = 2

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {rendered}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class TapeError(SamPeftError, RuntimeError):
    exit_code = 4
