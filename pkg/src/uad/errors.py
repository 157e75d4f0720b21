"""Exception hierarchy shared across the package.

Everything derives from UadError so callers (and the CLI) can map the
whole family onto exit codes without enumerating modules.
"""


class UadError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(UadError):
    """An argument or precondition check failed."""


class FormatError(UadError):
    """A file is structurally malformed (header, columns, JSON)."""


class CorruptVolumeError(UadError):
    """Volume payload inconsistent with its header (shape/byte count)."""


class DegenerateVolumeError(UadError):
    """Volume unusable for the requested operation (empty mask, zero variance)."""


class StratificationError(UadError):
    """Age-stratified splitting cannot satisfy the requested fractions."""


class PlacementError(UadError):
    """Anomaly blob placement failed after exhausting rejection samples."""


class ShapeError(UadError):
    """Tensor/array shape does not match the expected shape."""


class UnsupportedVariantError(UadError):
    """Operation requested on a model variant that does not support it."""


class ContaminationError(UadError):
    """Anomalous entry found in the training split."""


class DivergenceError(UadError):
    """Training produced a non-finite loss."""


class ConfigMismatchError(UadError):
    """Checkpoint config hash does not match the requested config."""


class PipelineMismatchError(UadError):
    """Volume offered for scoring was not preprocessed like the training data."""


class MissingScoreError(UadError):
    """Score fusion needs a component that is absent from the triple."""


class DegenerateValidationError(UadError):
    """Validation set has a single class; grid search is undefined."""


class DegenerateLabelsError(UadError):
    """Metric undefined for the given label set (single class / no positives)."""


class BootstrapDegeneracyError(UadError):
    """Bootstrap could not draw enough non-degenerate resamples."""
