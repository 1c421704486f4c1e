"""Exception hierarchy shared by all pipeline stages."""


class LongMRIError(Exception):
    """Base class for every error raised by this package."""


class NiftiFormatError(LongMRIError):
    pass


class UnsupportedDatatypeError(NiftiFormatError):
    pass


class CorruptFileError(NiftiFormatError):
    pass


class ParameterError(LongMRIError, ValueError):
    pass


class ShapeError(LongMRIError, ValueError):
    pass


class EmptyInputError(LongMRIError, ValueError):
    """Raised when an operation receives no usable voxels or values."""


class ExtractionError(LongMRIError):
    pass


class DegenerateInputError(LongMRIError, ValueError):
    pass


class ClassCollapseError(LongMRIError):
    pass


class SeriesTooShortError(LongMRIError, ValueError):
    pass


class ManifestError(LongMRIError, ValueError):
    pass
