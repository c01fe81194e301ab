"""Optimizer, learning-rate schedule, early stopping, and the train loop.

The loop is deliberately deterministic: a seeded generator drives the
minibatch shuffle, the optimizer state is keyed by parameter name in
creation order, and the epoch log carries everything needed to compare
two runs (wall-clock seconds are recorded but excluded from the
comparable view).
"""

import dataclasses
import time

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE
from .checkpoint import save_checkpoint
from .errors import ConfigError, DimensionError, NumericalError
from .data import fit_norm_stats, normalize_pairs
from .trunk import normalize_coords


def mse_loss(pred, target):
    """Mean squared error over every element, as a scalar graph node."""
    pred = ad.as_node(pred)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise DimensionError(
            f"loss shapes differ: prediction {pred.shape} vs target {target.shape}"
        )
    diff = pred - ad.as_node(target)
    return ad.mean_all(ad.power(diff, 2))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the optimization loop."""

    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    lr_min: float = 1e-7
    early_stop_patience: int = 10
    max_epochs: int = 500
    batch_size: int = 8
    seed: int = 0

    def validate(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(
                f"plateau_factor must be in (0, 1), got {self.plateau_factor}"
            )
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be at least 1")
        if self.plateau_threshold < 0:
            raise ConfigError(
                f"plateau_threshold must be non-negative, got {self.plateau_threshold}"
            )
        if self.lr_min <= 0 or self.lr_min > self.lr0:
            raise ConfigError(
                f"lr_min must be in (0, lr0], got {self.lr_min} with lr0={self.lr0}"
            )
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("Adam betas must be in [0, 1)")
        return self


class Adam:
    """Adam with bias correction; state is kept per parameter name.

    The learning rate is passed to each ``step`` so a schedule can move
    it between epochs without touching the moment estimates.
    """

    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._t = 0
        self._m = {name: np.zeros_like(node.value)
                   for name, node in store.items()}
        self._v = {name: np.zeros_like(node.value)
                   for name, node in store.items()}

    def step(self, lr):
        """Apply one update from the gradients currently in the store."""
        self._t += 1
        t = self._t
        grads = self.store.grads()
        for name, node in self.store.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericalError(
                    f"non-finite gradient for parameter '{name}' at step {t}"
                )
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            node.value = node.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without real progress.

    "Real progress" means the validation loss beats the best seen by
    more than ``threshold`` (absolute); only such epochs move the best
    and clear the counter. Reducing also clears the counter, and the
    rate never drops below ``lr_min``. The state is a pure function of
    the sequence of values fed to ``update``.
    """

    def __init__(self, lr0, factor=0.5, patience=5, threshold=1e-4, lr_min=1e-7):
        self.lr = float(lr0)
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.lr_min = lr_min
        self._best = np.inf
        self._bad = 0

    def update(self, val_loss):
        """Feed one epoch's validation loss; returns the rate to use next."""
        if val_loss < self._best - self.threshold:
            self._best = val_loss
            self._bad = 0
        else:
            self._bad += 1
            if self._bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self._bad = 0
        return self.lr


class EarlyStopper:
    """Stop after ``patience`` epochs without any strict improvement."""

    def __init__(self, patience=10):
        self.patience = patience
        self._best = np.inf
        self._bad = 0

    def update(self, val_loss):
        """Feed one epoch's validation loss; True means stop now."""
        if val_loss < self._best:
            self._best = val_loss
            self._bad = 0
        else:
            self._bad += 1
        return self._bad >= self.patience


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


class TrainLog:
    """Per-epoch history with a CSV view.

    ``comparable_rows`` drops the wall-clock column so two runs of the
    same seeded configuration can be compared exactly.
    """

    COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")

    def __init__(self):
        self.rows = []

    def append(self, epoch, train_loss, val_loss, lr, seconds):
        self.rows.append(EpochRecord(epoch, float(train_loss), float(val_loss),
                                     float(lr), float(seconds)))

    def __len__(self):
        return len(self.rows)

    def comparable_rows(self):
        return [(r.epoch, r.train_loss, r.val_loss, r.lr) for r in self.rows]

    def to_csv(self):
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(
                f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{r.seconds!r}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


@dataclasses.dataclass
class TrainResult:
    log: TrainLog
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    final_lr: float
    stopped_early: bool


def _batches(n, size, perm):
    for start in range(0, n, size):
        yield perm[start:start + size]


def train(model, splits, coords_deg, cfg, checkpoint_path=None):
    """Fit a model on chronological splits; returns the epoch history.

    Normalization statistics come from the training pairs alone and are
    attached to the model. Each epoch runs seeded shuffled minibatches,
    then a full pass over the validation pairs; the schedule sees the
    validation loss before the stopper does. The parameters with the
    best validation loss are restored at the end (and written to
    ``checkpoint_path`` the moment they are observed, so a later
    divergence cannot destroy them).
    """
    cfg.validate()
    if not splits.train:
        raise ConfigError("training split is empty")
    if not splits.val:
        raise ConfigError("validation split is empty")

    coords_deg = np.asarray(coords_deg, dtype=DTYPE)
    coords = normalize_coords(coords_deg)
    n_points = coords.shape[0]
    expected_target = (n_points, model.trunk_cfg.p, model.trunk_cfg.k_fut)
    first = splits.train[0]
    if first.target.shape != expected_target:
        raise DimensionError(
            f"target shape {first.target.shape} does not match model output "
            f"{expected_target}"
        )
    if first.history.shape != (model.k_hist, model.branch_cfg.n_sensors):
        raise DimensionError(
            f"history shape {first.history.shape} does not match model input "
            f"({model.k_hist}, {model.branch_cfg.n_sensors})"
        )

    stats = fit_norm_stats(splits.train)
    model.norm_stats = stats
    train_pairs = normalize_pairs(splits.train, stats)
    val_pairs = normalize_pairs(splits.val, stats)

    train_hist = np.stack([p.history for p in train_pairs])
    train_tgt = np.stack([p.target for p in train_pairs])
    val_hist = np.stack([p.history for p in val_pairs])
    val_tgt = np.stack([p.target for p in val_pairs])
    n_train = train_hist.shape[0]

    optimizer = Adam(model.store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    scheduler = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience,
                                 cfg.plateau_threshold, cfg.lr_min)
    stopper = EarlyStopper(cfg.early_stop_patience)
    rng = np.random.default_rng(cfg.seed)

    log = TrainLog()
    best_val = np.inf
    best_epoch = 0
    best_state = None
    lr = cfg.lr0
    stopped_early = False

    try:
        for epoch in range(1, cfg.max_epochs + 1):
            tic = time.perf_counter()
            perm = rng.permutation(n_train)
            total = 0.0
            for idx in _batches(n_train, cfg.batch_size, perm):
                model.store.zero_grad()
                pred = model.forward(train_hist[idx], coords)
                loss = mse_loss(pred, train_tgt[idx])
                ad.backward(loss)
                optimizer.step(lr)
                total += float(loss.value) * len(idx)
            train_loss = total / n_train

            val_pred = model.forward(val_hist, coords)
            val_loss = float(mse_loss(val_pred, val_tgt).value)
            if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
                raise NumericalError(
                    f"training diverged: non-finite loss at epoch {epoch} "
                    f"(train={train_loss}, val={val_loss})"
                )

            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_state = model.store.state_arrays()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model,
                                    meta={"epoch": epoch, "val_loss": val_loss})

            seconds = time.perf_counter() - tic
            log.append(epoch, train_loss, val_loss, lr, seconds)

            lr = scheduler.update(val_loss)
            if stopper.update(val_loss):
                stopped_early = True
                break
    except NumericalError:
        if best_state is not None:
            model.store.load_arrays(best_state)
        raise

    if best_state is not None:
        model.store.load_arrays(best_state)

    return TrainResult(log=log, best_val_loss=float(best_val),
                       best_epoch=best_epoch, epochs_run=len(log),
                       final_lr=lr, stopped_early=stopped_early)
