"""Exception hierarchy shared by every hla module."""


class HLAError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(HLAError, ValueError):
    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class DegenerateColumnError(HLAError, ValueError):
    def __init__(self, column, norm):
        super().__init__(f"column {column} has degenerate norm {norm!r}")
        self.column = column


class DegenerateInputError(HLAError, ValueError):
    pass


class NotNormalizedError(HLAError, ValueError):
    pass


class AllZeroColumnError(HLAError, ValueError):
    """A ternary column has no nonzero entries, so its scale is undefined."""

    def __init__(self, column, layer=None):
        where = f"layer {layer}, " if layer is not None else ""
        super().__init__(f"{where}column {column} quantizes to all zeros")
        self.column = column
        self.layer = layer


class DomainError(HLAError, ValueError):
    pass


class MissingCacheError(HLAError, RuntimeError):
    pass


class DivergenceError(HLAError, RuntimeError):
    pass


class FormatError(HLAError):
    """Base for file-format problems."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class CorruptDataError(FormatError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class WrongMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ConfigError(HLAError):
    pass
