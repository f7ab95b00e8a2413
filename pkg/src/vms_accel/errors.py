"""Exception hierarchy shared by the screening kernels, models and the CLI."""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Optional, Union


class VmsError(RuntimeError):
    """Base class for every error raised by vms_accel."""


class InputValidationError(VmsError, ValueError):
    """Raised when an argument, index, shape or parameter is out of contract."""


class UsageError(VmsError):
    """Raised for command-line usage problems (unknown engine, missing inputs)."""


class FileFormatError(InputValidationError):
    """Raised when a file cannot be parsed; always names the file and position."""

    def __init__(
        self,
        path: Union[str, Path, None],
        message: str,
        *,
        line: Optional[int] = None,
        offset: Optional[int] = None,
    ) -> None:
        self.path = str(path) if path is not None else "<memory>"
        self.line = line
        self.offset = offset
        where = self.path
        if line is not None:
            where = f"{where}:{line}"
        elif offset is not None:
            where = f"{where}@{offset}"
        super().__init__(f"{where}: {message}")


class AccumulatorOverflowError(VmsError, OverflowError):
    """Raised when an exact accumulation would exceed its declared width."""

    def __init__(self, context: str, message: str) -> None:
        self.context = context
        super().__init__(f"accumulator overflow in {context}: {message}")


class LimitingFactor(str, Enum):
    """What bounds a kernel mapping (or makes it infeasible)."""

    COMPUTE = "compute"
    BANDWIDTH = "bandwidth"
    ONCHIP_STORAGE = "onchip_storage"
    DSP = "dsp"
    BUDGET = "budget"
    RANGE = "range"


class InfeasibleError(VmsError):
    """Raised when no configuration satisfies the constraints."""

    def __init__(self, message: str, limiting_factor: LimitingFactor) -> None:
        self.limiting_factor = limiting_factor
        super().__init__(f"{message} (limiting factor: {limiting_factor.value})")


class DeadlockError(VmsError):
    """Raised by the pipeline simulator when no stage can ever fire again."""

    def __init__(self, link: str, cycle: int, detail: str) -> None:
        self.link = link
        self.cycle = cycle
        super().__init__(f"deadlock at cycle {cycle} on link {link}: {detail}")


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3

# Checked in order; the first matching class wins.
_EXIT_CODE_BY_ERROR: tuple[tuple[type[BaseException], int], ...] = (
    (UsageError, EXIT_USAGE),
    (InfeasibleError, EXIT_INFEASIBLE),
    (InputValidationError, EXIT_INPUT),
    (AccumulatorOverflowError, EXIT_INPUT),
    (DeadlockError, EXIT_INPUT),
    (OSError, EXIT_INPUT),
)


def exit_code_for(exc: BaseException) -> int:
    """Map an exception raised by a command onto the documented exit codes."""

    for cls, code in _EXIT_CODE_BY_ERROR:
        if isinstance(exc, cls):
            return code
    return EXIT_INPUT


__all__ = [
    "AccumulatorOverflowError",
    "DeadlockError",
    "EXIT_INFEASIBLE",
    "EXIT_INPUT",
    "EXIT_OK",
    "EXIT_USAGE",
    "FileFormatError",
    "InfeasibleError",
    "InputValidationError",
    "LimitingFactor",
    "UsageError",
    "VmsError",
    "exit_code_for",
]
