"""Exception types shared across the pipeline."""

from __future__ import annotations


class PamCurateError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(PamCurateError):
    """An input value or data structure violates a documented invariant."""


class ParseError(PamCurateError):
    """A file does not match its declared format.

    ``offset`` is the byte position (or line number for text formats) at
    which the malformed structure begins.
    """

    def __init__(self, message: str, *, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ShardMagicError(ParseError):
    """Embedding shard does not start with the expected magic bytes."""


class ShardDimError(ParseError):
    """Embedding shard header declares an unusable or unexpected dimension."""


class ShardTruncatedError(ParseError):
    """Embedding shard ends mid-structure."""


class DegenerateFitError(PamCurateError):
    """Clustering cannot proceed (e.g. fewer distinct points than clusters)."""
