"""Exception types raised across the toolkit.

Library code raises these; only ``src.cli`` turns them into exit statuses.
"""
from __future__ import annotations
from typing import Any, Optional, Sequence, Tuple


class TwparseError(Exception):
    """Base class for every error this package raises on purpose."""


class UsageError(TwparseError, ValueError):
    pass


class EmptyInputError(TwparseError, ValueError):
    pass


class ConlluFormatError(TwparseError, ValueError):
    """Malformed CoNLL-U input, reported with the offending line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class InvalidSentenceError(ConlluFormatError):
    def __init__(self, message: str, violations: Sequence[Any] = (), line: Optional[int] = None):
        self.violations = list(violations)
        super().__init__(message, line)


class NonProjectiveError(TwparseError, ValueError):
    def __init__(self, sent_id: str, arcs: Tuple[Tuple[int, int], Tuple[int, int]]):
        self.sent_id = sent_id
        self.arcs = arcs
        (h1, d1), (h2, d2) = arcs
        super().__init__(
            f"sentence {sent_id!r} is non-projective: arc {h1}->{d1} crosses arc {h2}->{d2}"
        )


class TerminalStateError(TwparseError, RuntimeError):
    pass


class IllegalActionError(TwparseError, ValueError):
    pass


class AlignmentFailure(TwparseError, ValueError):
    def __init__(self, token: str, position: int):
        self.token = token
        self.position = position
        super().__init__(f"cannot align token {token!r} at character {position}")


class DimensionMismatchError(TwparseError, ValueError):
    pass


class NonFiniteGradientError(TwparseError, FloatingPointError):
    def __init__(self, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(f"non-finite gradient in {tensor_name!r}; update aborted")


class TapeInvalidatedError(TwparseError, RuntimeError):
    pass


class ModelFormatError(TwparseError, ValueError):
    pass


class IncompatibleModeError(TwparseError, ValueError):
    pass


class ManifestError(TwparseError, ValueError):
    pass


class IncompleteParseError(TwparseError, RuntimeError):
    pass


class TagSequenceError(TwparseError, ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"character {position}: {message}")


class RawMismatchError(TwparseError, ValueError):
    pass


class InputEncodingError(TwparseError, ValueError):
    """Input that is not valid UTF-8, reported with the offending byte offset."""

    def __init__(self, path: str, offset: int, reason: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: not valid UTF-8 at byte {offset} ({reason})")


class AllowlistError(TwparseError, ValueError):
    def __init__(self, path: str, line: int, message: str):
        self.line = line
        super().__init__(f"{path} line {line}: {message}")
