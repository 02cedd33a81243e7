"""Exception hierarchy shared across the package."""


class EcgLatentError(Exception):
    """Base class for all package errors."""


class ParameterError(EcgLatentError):
    """Invalid parameter or configuration value."""


class FormatError(EcgLatentError):
    """Malformed dataset file; message names the record and offset."""


class ShapeError(EcgLatentError):
    """Array shape does not match what an operation requires."""


class LeadMissingError(EcgLatentError):
    """A required ECG lead is absent from the input."""


class ExtractionError(EcgLatentError):
    """No usable beat window could be extracted from a record."""


class DegenerateScaleError(EcgLatentError):
    """Dataset has zero amplitude; scaling is undefined."""


class NotFittedError(EcgLatentError):
    """Model used before it has seen enough data."""


class OptimizerError(EcgLatentError):
    """Non-finite gradient or other optimizer failure."""


class StateError(EcgLatentError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class ConditioningError(EcgLatentError):
    """Linear system is rank deficient and no regularization was given."""


class TrainingError(EcgLatentError):
    """Training aborted (non-finite loss), with epoch/batch context."""


class CliError(EcgLatentError):
    """Command-level failure: missing upstream artifact or bad config."""
