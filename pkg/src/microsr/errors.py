"""Exception types shared across the package."""


class MicrosrError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(MicrosrError, ValueError):
    """Tensor shapes are inconsistent with the requested operation."""


class DimensionError(MicrosrError, ValueError):
    """Image dimensions violate a pipeline precondition."""


class CheckpointError(MicrosrError):
    """A checkpoint file is missing, corrupt, or inconsistent."""


class RegistrationError(MicrosrError):
    """Template matching cannot produce a defined correlation."""


class StitchError(MicrosrError):
    """A mosaic overlap failed to produce a confident match."""


class AlignmentError(MicrosrError):
    """Transform refinement found no acceptable alignment."""


class ManifestError(MicrosrError):
    """A dataset manifest is malformed or references missing data."""
