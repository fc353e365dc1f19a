"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class RssAtlasError(Exception):
    """Base class for all package errors."""


class ConfigError(RssAtlasError):
    """Invalid configuration value or malformed config file."""


class DataError(RssAtlasError):
    """Malformed input data (CSV files, inconsistent matrices)."""


class NumericalError(RssAtlasError):
    """A numerical procedure failed (non-PD matrix, divergence, underflow)."""


class GpFitError(NumericalError):
    """Gram matrix not positive definite even after the jitter retry."""


class TrainingDivergedError(NumericalError):
    """Autoencoder training produced a non-finite loss."""


class LikelihoodUnderflowError(NumericalError):
    """Every grid cell underflowed; the field cannot be normalized."""
