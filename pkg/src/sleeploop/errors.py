"""Exception hierarchy.

Every error raised by the package derives from :class:`SleepLoopError`.
Errors caused by bad input files or arguments derive from :class:`InputError`
(CLI exit code 2); errors raised when a value violates a documented
constraint derive from :class:`ValidationError` (CLI exit code 3).
"""

from __future__ import annotations


class SleepLoopError(Exception):
    exit_code = 1


class InputError(SleepLoopError):
    exit_code = 2


class ValidationError(SleepLoopError, ValueError):
    exit_code = 3


# core-model
class EmptyRecording(InputError):
    pass


class LengthMismatch(ValidationError):
    pass


class TooFewRaters(ValidationError):
    pass


# signal quality / dsp
class TooShort(ValidationError):
    pass


class MalformedTree(ValidationError):
    pass


class ZeroPower(ValidationError):
    pass


class MissingChannel(InputError):
    pass


# staging
class ShapeMismatch(ValidationError):
    pass


class EmptyEnsemble(ValidationError):
    pass


class InsufficientContext(ValidationError):
    pass


# vitals
class NoCleanChannel(ValidationError):
    pass


class TooFewBreaths(ValidationError):
    pass


class AllMasked(ValidationError):
    pass


# smoothing
class EmptyCorpus(ValidationError):
    pass


class AllUnscored(ValidationError):
    pass


# closed loop
class TooFewContents(ValidationError):
    pass


# synthgen
class InfeasibleProportions(ValidationError):
    pass


class SpanOutOfRange(ValidationError):
    pass


# evaluation
class EmptyMatrix(ValidationError):
    pass


class DegenerateMarginals(ValidationError):
    pass


class NonPositiveValue(ValidationError):
    pass


class ZeroVariance(ValidationError):
    pass


class GapLongerThanSession(ValidationError):
    pass


# io
class FormatError(InputError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)


class RateMismatch(InputError):
    pass


class ChannelMissing(InputError):
    pass


class ConfigError(ValidationError):
    pass
