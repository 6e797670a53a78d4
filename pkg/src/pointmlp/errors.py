"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class ConfigError(ValueError):
    """An architecture, training or augmentation setting is invalid."""


class NonFiniteError(FloatingPointError):
    """A forward value or loss became NaN or infinite."""


class FormatError(Exception):
    """Base class for binary file format problems."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass
