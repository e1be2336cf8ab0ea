"""Exception hierarchy.

Argument problems subclass :class:`ValueError` so callers that only care about
"bad input" can catch the builtin.
"""


class MorphFaceError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MorphFaceError, ValueError):
    pass


class DegenerateGeometryError(InvalidArgumentError):
    """Input geometry collapses (coincident points, zero scale)."""


class UnderConstrainedError(InvalidArgumentError):
    """Too few observations to determine the requested parameters."""


class ConfigurationError(InvalidArgumentError):
    pass


class EmptyTextureError(MorphFaceError):
    """No vertex carries a valid color, nothing to propagate."""


class FormatError(MorphFaceError):
    """Malformed file content."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, what: str, expected: int, actual: int):
        super().__init__(f"{what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class SchemaError(FormatError):
    """JSON document does not match the expected schema."""


class UnsupportedFormatError(FormatError):
    pass
