"""Exception hierarchy shared by services and the CLI."""

from __future__ import annotations


class MarketDynError(Exception):
    """Base class for all package errors."""


class DataValidationError(MarketDynError, ValueError):
    """Input data, configuration, or a precondition is invalid."""


class ParseError(DataValidationError):
    """A CSV or config file could not be parsed."""

    def __init__(self, message: str, *, path: str | None = None, row: int | None = None) -> None:
        self.path = path
        self.row = row
        where = []
        if path:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class ComputationError(MarketDynError, ArithmeticError):
    """A numerical quantity is undefined for the given data."""


class UndefinedDistanceError(ComputationError):
    """A distance is undefined for the pair, e.g. an empty break set."""


class StageError(MarketDynError):
    """A pipeline stage failed."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_COMPUTATION = 2
EXIT_INTERNAL = 3
EXIT_USAGE = 64


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code.

    Validation and missing files give 1, package computation failures 2, and
    anything the package did not raise itself 3. A stage error maps by its cause.
    """
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, DataValidationError | FileNotFoundError):
        return EXIT_VALIDATION
    if isinstance(exc, MarketDynError):
        return EXIT_COMPUTATION
    return EXIT_INTERNAL
