"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/config
problems exit 2, numerical aborts exit 3.
"""


class SpmimError(Exception):
    """Base class for all package errors."""


class DimensionError(SpmimError):
    """Tensor shapes are incompatible for the requested operation."""


class GeometryError(SpmimError):
    """Spatial geometry is inconsistent (non-integer output size,
    indivisible extents, mask level mismatched with stride)."""


class ArgumentError(SpmimError):
    """An argument is outside its documented domain."""


class StateError(SpmimError):
    """Operation invoked in an invalid state (e.g. backward on a
    non-scalar node)."""


class NumericsError(SpmimError):
    """A forward value or gradient became NaN/Inf."""


class DegenerateBatchError(SpmimError):
    """Batch statistics undefined: no visible positions in train mode."""


class DegenerateLossError(SpmimError):
    """Loss undefined: no masked pixels to average over."""


class ConfigError(SpmimError):
    """Run configuration is invalid or inconsistent."""


class DataError(SpmimError):
    """Dataset or image file cannot be used (unsupported format,
    truncated file, bad manifest line)."""


class StratificationError(SpmimError):
    """Stratified split infeasible: some class has fewer members than
    the number of folds."""


class MetricError(SpmimError):
    """Metric undefined for the given inputs (single-class AUC, zero
    expected disagreement in kappa)."""


class CheckpointError(SpmimError):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    """File does not start with the expected magic bytes or has a
    malformed header."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unknown format version."""


class CheckpointCorruptionError(CheckpointError):
    """Payload truncated or a per-tensor checksum mismatch."""
