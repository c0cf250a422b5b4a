"""Exception hierarchy shared across the package."""


class NanosynthError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ValidationError(NanosynthError, ValueError):
    """Invalid user input: config fields, dataset layout, parameters."""

    exit_code = 1


class ConfigError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class CheckpointError(ValidationError):
    """Checkpoint file is unreadable, truncated, or incompatible with the run."""


class ExtractorUnavailableError(NanosynthError):
    pass


class DensityError(NanosynthError):
    """Disjoint particle placement could not be completed."""

    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = achieved


class NonFiniteLossError(NanosynthError, FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"non-finite loss in term {term!r}: {value}")
        self.term = term
        self.value = value
