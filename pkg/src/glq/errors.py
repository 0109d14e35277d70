"""Exception types shared across the package."""


class GlqError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(GlqError):
    """Array arguments have incompatible or unexpected shapes."""


class NotPositiveDefinite(GlqError):
    """Cholesky hit a pivot <= 0; the caller should raise the damping."""


class DivergedLoss(GlqError):
    """Training produced a non-finite loss or gradient."""


class EmptyCalibration(GlqError):
    """A calibration set with zero samples was supplied."""


class PartitionMismatch(GlqError):
    """A channel partition does not cover the layer it is applied to."""


class TooFewDistinctPoints(GlqError):
    """Fewer distinct points than requested codebook entries."""


class ZeroDiagonal(GlqError):
    """A Hessian diagonal entry is <= 0 where a division by it is required."""


class TooLarge(GlqError):
    """A brute-force oracle was asked for more work than its hard cap."""


class CorruptFile(GlqError):
    """A tensor file failed validation (magic, shape, or payload size)."""


class UnsupportedDtype(GlqError):
    """A tensor file declares a dtype code this reader does not know."""


class InvalidSize(GlqError):
    """A size or count argument is out of its legal range."""


class ConfigError(GlqError):
    """A run configuration failed validation."""
