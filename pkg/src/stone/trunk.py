"""Trunk decoder: spatial coordinate in, per-point basis tensor out.

The trunk reads only a normalized coordinate pair (u, v) in [0,1]^2 and
emits, for each query point, a [q x p x K_fut] stack of basis values:
one value per (coefficient channel, output channel, future lead). Time
never enters the trunk; every lead's basis is produced side by side,
which is what makes single-pass forecasting possible downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, CoordinateRangeError, DimensionError
from .layers import DenseLayer


@dataclass(frozen=True)
class TrunkConfig:
    q: int
    k_fut: int
    p: int = 1
    hidden: int = 128
    layers: int = 2

    def validate(self):
        for field in ("q", "k_fut", "p", "hidden", "layers"):
            if int(getattr(self, field)) < 1:
                raise ConfigError(f"trunk {field} must be >= 1")
        return self


def normalize_coords(coords_deg):
    """Map (lat, lon) degrees to the unit square.

    u = (lat + 90) / 180 with lat in [-90, 90];
    v = (lon + 180) / 360 with lon in [-180, 180).
    """
    coords = np.asarray(coords_deg, dtype=ad.DTYPE)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(
            f"normalize_coords expects [P x 2] (lat, lon), got {coords.shape}"
        )
    lat, lon = coords[:, 0], coords[:, 1]
    bad_lat = (lat < -90.0) | (lat > 90.0)
    if np.any(bad_lat):
        raise CoordinateRangeError(
            f"latitude outside [-90, 90]: {lat[bad_lat][0]}"
        )
    bad_lon = (lon < -180.0) | (lon >= 180.0)
    if np.any(bad_lon):
        raise CoordinateRangeError(
            f"longitude outside [-180, 180): {lon[bad_lon][0]}"
        )
    return np.column_stack(((lat + 90.0) / 180.0, (lon + 180.0) / 360.0))


class TrunkDecoder:
    """Dense-relu stack ending in a linear layer reshaped to [P,q,p,K]."""

    def __init__(self, cfg, store, rng):
        cfg.validate()
        self.cfg = cfg
        self.hidden = []
        in_dim = 2
        for i in range(cfg.layers):
            self.hidden.append(
                DenseLayer(store, f"trunk.fc{i}", in_dim, cfg.hidden, rng,
                           activation="relu")
            )
            in_dim = cfg.hidden
        self.out = DenseLayer(store, "trunk.out", in_dim,
                              cfg.q * cfg.p * cfg.k_fut, rng)

    def decode(self, coords):
        """Basis for normalized coords [P x 2]; strict [0,1]^2 domain.

        Output layout: flat index runs lead fastest, then output
        channel, then coefficient channel, i.e. a C-order reshape to
        [P x q x p x K_fut].
        """
        coords = ad.as_node(coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise DimensionError(
                f"trunk expects coords [P x 2], got {coords.shape}"
            )
        if np.any(coords.value < 0.0) or np.any(coords.value > 1.0):
            raise CoordinateRangeError(
                "trunk coordinates must lie in [0,1]^2; callers normalize first"
            )
        h = coords
        for layer in self.hidden:
            h = layer.forward(h)
        raw = self.out.forward(h)
        cfg = self.cfg
        return ad.reshape(raw, (coords.shape[0], cfg.q, cfg.p, cfg.k_fut))
