"""Desk-scale operator-learning toolkit for spatio-temporal forecasting.

Maps a short history from a handful of fixed sensors, plus spatial
query coordinates, to a full future field in one forward pass: a branch
network encodes the history into coefficients, a trunk network turns
coordinates into a basis, and a tensor contraction assembles every
future lead at once.
"""

from .errors import (
    StoneError,
    ConfigError,
    DimensionError,
    ContractError,
    DataError,
    IngestionError,
    FormatError,
    CoordinateRangeError,
    NumericalError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "StoneError",
    "ConfigError",
    "DimensionError",
    "ContractError",
    "DataError",
    "IngestionError",
    "FormatError",
    "CoordinateRangeError",
    "NumericalError",
    "UndefinedMetricError",
    "StoneForecaster",
    "__version__",
]


def __getattr__(name):
    # Lazy import so the autodiff core stays importable without sklearn.
    if name == "StoneForecaster":
        from .estimator import StoneForecaster

        return StoneForecaster
    raise AttributeError(f"module 'stone' has no attribute '{name}'")
