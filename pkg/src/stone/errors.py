"""Exception hierarchy.

The CLI maps these onto stable exit codes: ConfigError family -> 2,
DataError family -> 3, NumericalError family -> 4.
"""


class StoneError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(StoneError):
    """Invalid configuration, schema violation, or API misuse."""


class DimensionError(ConfigError):
    """Shape or rank mismatch between arrays that must agree."""


class ContractError(ConfigError):
    """A documented precondition of an operation was violated."""


class DataError(StoneError):
    """Problem with user-supplied data (files, values, coordinates)."""


class IngestionError(DataError):
    """Malformed sensor CSV: bad dates, gaps, or non-numeric cells."""


class FormatError(DataError):
    """Malformed binary file (field pack or checkpoint)."""


class CoordinateRangeError(DataError):
    """Coordinate outside its documented domain."""


class NumericalError(StoneError):
    """Non-finite values, domain violations, or diverged training."""


class UndefinedMetricError(NumericalError):
    """Metric has no defined value for the given inputs."""
