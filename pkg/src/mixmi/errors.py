"""Exception types shared across the package."""


class MixmiError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MixmiError):
    """Invalid configuration or command-line usage."""


class DataError(MixmiError):
    """Malformed or unusable input data (ingestion, masking, format)."""


class UntrainableFiberError(MixmiError):
    """A (variable, time-index) fiber has no observed targets to train on."""


class GpUntrainableError(MixmiError):
    """No patient series is long enough to support the GP component."""


class NumericalError(MixmiError):
    """A numerical routine failed (factorization, non-finite values)."""
