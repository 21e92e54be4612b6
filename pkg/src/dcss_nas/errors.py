"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto its exit-code contract: configuration problems exit
with 2, numeric failures with 3 and artifact I/O failures with 4.
"""

from __future__ import annotations

from pathlib import Path


class DcssError(Exception):
    """Base class for all errors raised by dcss-nas."""

    exit_code: int = 1


class ShapeError(DcssError, ValueError):
    """A tensor operand has the wrong extent along a named dimension."""

    def __init__(self, op: str, dimension: str, expected: object, got: object) -> None:
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {dimension} mismatch (expected {expected}, got {got})")


class ConfigError(DcssError, ValueError):
    """A configuration document failed to parse or validate."""

    exit_code = 2

    def __init__(
        self, message: str, *, line: int | None = None, source: str | None = None
    ) -> None:
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")


class NumericalError(DcssError, ArithmeticError):
    """A loss or gradient became non-finite, or an estimator is undefined."""

    exit_code = 3

    def __init__(self, message: str, *, diagnostics: Path | None = None) -> None:
        self.diagnostics = diagnostics
        suffix = f" (diagnostics: {diagnostics})" if diagnostics is not None else ""
        super().__init__(f"{message}{suffix}")


class DegenerateSampleError(NumericalError):
    """A correlation estimator was asked for a sample with zero variance."""

    def __init__(self, message: str = "degenerate sample") -> None:
        super().__init__(message)


class LabelError(DcssError, ValueError):
    """A label map holds a value outside [0, num_classes) other than ignore_index."""


class ArtifactError(DcssError, OSError):
    """A checkpoint, dataset or report file is missing, unreadable or malformed."""

    exit_code = 4
