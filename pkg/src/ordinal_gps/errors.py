"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class OrdinalGPSError(Exception):
    """Base class for all package errors.

    ``stage`` is filled in by the orchestrator so that a failure deep inside a
    model fit can be reported with the pipeline step that triggered it.
    """

    exit_code = 2

    def __init__(self, message: str = "", *, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ModelError(OrdinalGPSError):
    pass


class NonConvergence(ModelError):
    exit_code = 3


class SeparationDetected(ModelError):
    exit_code = 3


class RankDeficientDesign(ModelError):
    pass


class InsufficientRows(ModelError):
    pass


class EmptySupport(OrdinalGPSError):
    pass


class EmptyCell(OrdinalGPSError):
    def __init__(self, level: int, subclass: int | None = None, **kw):
        where = f"level {level}" if subclass is None else f"level {level} in subclass {subclass}"
        super().__init__(f"no units at {where}", **kw)
        self.level = level
        self.subclass = subclass


class EmptyLevel(OrdinalGPSError):
    def __init__(self, level: int, **kw):
        super().__init__(f"treatment level {level} has no units", **kw)
        self.level = level


class ConstantVector(OrdinalGPSError):
    pass


class ZeroProbability(OrdinalGPSError):
    pass


class SchemaMismatch(OrdinalGPSError):
    pass


class UnparseableValue(OrdinalGPSError):
    def __init__(self, row: int, column: str, value: str, **kw):
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}", **kw)
        self.row = row
        self.column = column
        self.value = value


class EmptyAfterFiltering(OrdinalGPSError):
    pass


class ConfigError(OrdinalGPSError):
    pass
