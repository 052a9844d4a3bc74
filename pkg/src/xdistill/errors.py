"""Exception types raised across the package."""


class XDistillError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(XDistillError):
    """Tensor or layer shapes are incompatible with the requested operation."""


class LabelError(XDistillError):
    """A label vector is not a valid probability vector."""


class DivergenceError(XDistillError):
    """Training produced a non-finite loss."""


class ConfigError(XDistillError):
    """A run-configuration file is malformed or contains unknown keys."""


class ModelFormatError(XDistillError):
    """Base class for model-file parsing failures."""


class BadMagicError(ModelFormatError):
    """Model file does not start with the expected magic bytes."""


class VersionMismatchError(ModelFormatError):
    """Model file declares an unsupported format version."""


class TruncatedPayloadError(ModelFormatError):
    """Model file ends before the declared header/payload/checksum."""


class PayloadLengthError(ModelFormatError):
    """Header-declared element counts disagree with the payload present."""


class ChecksumError(ModelFormatError):
    """Trailing payload checksum does not match the stored bytes."""


class IdxFormatError(XDistillError):
    """Base class for IDX dataset parsing failures."""


class IdxMagicError(IdxFormatError):
    """IDX file has an unexpected magic number."""


class IdxDimensionError(IdxFormatError):
    """IDX declared dimensions disagree with the bytes present."""


class IdxCountMismatchError(IdxFormatError):
    """Image count and label count disagree."""
