"""Small input validators shared by the estimator facade and the CLI."""

import numpy as np

from .autodiff import DTYPE
from .errors import DataError, DimensionError


def require_matrix(name, x, width=None):
    """Coerce to a float64 [rows x cols] matrix, optionally of fixed width."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    if width is not None and x.shape[1] != width:
        raise DimensionError(
            f"{name} must have {width} columns, got {x.shape[1]}"
        )
    return x


def require_finite(name, x):
    x = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(x)):
        bad = int(np.count_nonzero(~np.isfinite(x)))
        raise DataError(f"{name} contains {bad} non-finite value(s)")
    return x


def require_coords(name, x):
    """A [points x 2] block of (lat, lon) degrees."""
    x = require_matrix(name, x, width=2)
    return require_finite(name, x)
