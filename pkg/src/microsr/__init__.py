"""Microscopy super-resolution toolkit.

A self-contained implementation of a pyramidal residual CNN that maps
low-resolution microscope images to 2.5x upsampled outputs, together
with the data registration pipeline used to build training pairs and
the SSIM / bar-target MTF machinery used to evaluate results. All
numerics are plain numpy; no autodiff framework is involved.
"""

__version__ = "0.1.0"

from .errors import (
    AlignmentError,
    CheckpointError,
    DimensionError,
    MicrosrError,
    RegistrationError,
    ShapeError,
    StitchError,
)

__all__ = [
    "AlignmentError",
    "CheckpointError",
    "DimensionError",
    "MicrosrError",
    "RegistrationError",
    "ShapeError",
    "StitchError",
    "__version__",
]
