"""Exception types raised across the package.

Most errors carry enough context (positions, shapes, byte counts) to point
at the offending input directly.
"""

from __future__ import annotations


class AttnCtlError(Exception):
    """Base class for all library errors."""


# ---------------------------------------------------------------- prompts

class PromptError(AttnCtlError):
    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at char {position})"
        super().__init__(message)
        self.position = position


class UnbalancedBraces(PromptError):
    pass


class EmptyTag(PromptError):
    pass


class NestedSpan(PromptError):
    pass


class UnknownTag(AttnCtlError):
    pass


class TokenSpanOutOfBounds(AttnCtlError):
    pass


# ---------------------------------------------------------------- tensors

class ZeroDimension(AttnCtlError):
    pass


class DimensionMismatch(AttnCtlError):
    pass


class AllMaskedRow(AttnCtlError):
    pass


class UnknownMethod(AttnCtlError):
    pass


class OutOfRange(AttnCtlError):
    pass


class NonFiniteLatent(AttnCtlError):
    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step t={step})"
        super().__init__(message)
        self.step = step


# ---------------------------------------------------------------- dataset

class ExhaustedUniqueSpace(AttnCtlError):
    pass


class SetTooSmall(AttnCtlError):
    pass


class DegenerateShape(AttnCtlError):
    pass


# ---------------------------------------------------------------- metrics

class EmptyMask(AttnCtlError):
    pass


class ProviderFailure(AttnCtlError):
    pass


class EmptyTable(AttnCtlError):
    pass


# ---------------------------------------------------------------- wire

class WireError(AttnCtlError):
    """Base for protocol decode/encode failures; carries a status code."""

    status = 6  # generic internal error


class BadMagic(WireError):
    status = 1


class VersionUnsupported(WireError):
    status = 2


class LengthMismatch(WireError):
    status = 3

    def __init__(self, message: str, expected: int | None = None, actual: int | None = None):
        if expected is not None and actual is not None:
            message = f"{message}: expected {expected} bytes, got {actual}"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class NonFinitePayload(WireError):
    status = 4


class BadHeader(WireError):
    status = 5
