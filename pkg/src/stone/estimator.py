"""Scikit-learn style facade over the operator model and training loop.

``StoneForecaster`` follows the estimator contract: constructor
arguments are stored verbatim (so ``get_params`` / ``clone`` work), all
real work happens in ``fit``, and fitted state lives in trailing-
underscore attributes.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .branches import BranchConfig
from .data import FieldSequence, SensorSeries, chrono_split, make_windows
from .errors import ConfigError, DimensionError
from .metrics import evaluate_on_pairs
from .operator import build_model
from .training import TrainConfig, train
from .trunk import TrunkConfig, normalize_coords
from .validation import require_coords, require_finite, require_matrix

START_DAY = np.datetime64("2001-01-01", "D")


class StoneForecaster(BaseEstimator):
    """Forecast a spatial field from sparse sensor histories.

    ``fit`` takes the sensor matrix ``X`` of shape [days x sensors], the
    field frames ``y`` of shape [days x points] (rows are aligned days),
    and the grid ``coords`` in degrees; it windows the series, splits it
    chronologically, and trains the operator. ``predict`` maps one
    history window [k_hist x sensors] (or a stack of them) to physical
    fields [points x channels x k_fut].
    """

    def __init__(self, branch="gru", q=16, depth=3, heads=8, trunk_hidden=128,
                 trunk_layers=2, channels=1, k_hist=16, k_fut=16,
                 split=(0.45, 0.10, 0.45), lr0=1e-3, batch_size=8,
                 max_epochs=500, plateau_factor=0.5, plateau_patience=5,
                 plateau_threshold=1e-4, lr_min=1e-7, early_stop_patience=10,
                 seed=0):
        self.branch = branch
        self.q = q
        self.depth = depth
        self.heads = heads
        self.trunk_hidden = trunk_hidden
        self.trunk_layers = trunk_layers
        self.channels = channels
        self.k_hist = k_hist
        self.k_fut = k_fut
        self.split = split
        self.lr0 = lr0
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.plateau_threshold = plateau_threshold
        self.lr_min = lr_min
        self.early_stop_patience = early_stop_patience
        self.seed = seed

    def _check_is_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this StoneForecaster is not fitted yet; call fit first"
            )

    def fit(self, X, y, coords):
        """Window, split, and train; returns self."""
        if self.channels != 1:
            raise ConfigError(
                "day-aligned field frames carry one channel; got "
                f"channels={self.channels}"
            )
        X = require_finite("X", require_matrix("X", X))
        y = require_finite("y", require_matrix("y", y))
        coords = require_coords("coords", coords)
        if X.shape[0] != y.shape[0]:
            raise DimensionError(
                f"X and y must cover the same days, got {X.shape[0]} vs "
                f"{y.shape[0]}"
            )
        if y.shape[1] != coords.shape[0]:
            raise DimensionError(
                f"y has {y.shape[1]} points per frame but coords describe "
                f"{coords.shape[0]}"
            )
        days = START_DAY + np.arange(X.shape[0])
        sensors = SensorSeries(days, [f"station_{i+1}" for i in range(X.shape[1])], X)
        fields = FieldSequence(coords, y)
        pairs = make_windows(sensors, fields, self.k_hist, self.k_fut)
        splits = chrono_split(pairs, tuple(self.split))

        branch_cfg = BranchConfig(kind=self.branch, n_sensors=X.shape[1],
                                  k_hist=self.k_hist, q=self.q,
                                  depth=self.depth, heads=self.heads)
        trunk_cfg = TrunkConfig(q=self.q, k_fut=self.k_fut, p=self.channels,
                                hidden=self.trunk_hidden,
                                layers=self.trunk_layers)
        model = build_model(branch_cfg, trunk_cfg, seed=self.seed)
        cfg = TrainConfig(lr0=self.lr0, plateau_factor=self.plateau_factor,
                          plateau_patience=self.plateau_patience,
                          plateau_threshold=self.plateau_threshold,
                          lr_min=self.lr_min,
                          early_stop_patience=self.early_stop_patience,
                          max_epochs=self.max_epochs,
                          batch_size=self.batch_size, seed=self.seed)
        self.result_ = train(model, splits, coords, cfg)
        self.model_ = model
        self.splits_ = splits
        self.coords_ = coords.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """Physical forecast for one window [k_hist x sensors] or a stack."""
        self._check_is_fitted()
        X = np.asarray(X, dtype=float)
        stats = self.model_.norm_stats
        coords = normalize_coords(self.coords_)
        if X.ndim == 2:
            return self.model_.forecast_single_pass(stats.apply_sensors(X),
                                                    coords)
        if X.ndim == 3:
            return np.stack([
                self.model_.forecast_single_pass(stats.apply_sensors(w), coords)
                for w in X
            ])
        raise DimensionError(
            f"predict expects [k_hist x sensors] or a stack of windows, "
            f"got shape {X.shape}"
        )

    def score_report(self, name=None):
        """Per-lead metric report on the held-out test windows."""
        self._check_is_fitted()
        return evaluate_on_pairs(self.model_, self.splits_.test, self.coords_,
                                 name or self.branch)
