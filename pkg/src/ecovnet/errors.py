"""Exception types shared across the package."""


class EcovnetError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(EcovnetError, ValueError):
    """An argument is outside its allowed domain."""


class DimensionError(EcovnetError, ValueError):
    """Array shapes do not agree."""


class NumericalError(EcovnetError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class DataError(EcovnetError):
    """Input data (manifest, image, snapshot file) is malformed."""


class ManifestError(DataError):
    pass


class UnknownLabelError(ManifestError):
    pass


class DuplicatePathError(ManifestError):
    pass


class ImageFormatError(DataError):
    pass


class SnapshotFormatError(DataError):
    """Bad magic, unsupported version, or truncated payload."""


class ChecksumError(SnapshotFormatError):
    pass


class ShapeMismatchError(SnapshotFormatError):
    pass


class WidthMismatchError(SnapshotFormatError):
    pass


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    pass
