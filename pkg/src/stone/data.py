"""Data pipeline: sensor CSV, field packs, windows, splits, stats, synth.

File formats
------------
Sensor CSV: header ``date,<station>,...``; one row per day, ISO dates,
strictly increasing. Gaps of up to three consecutive missing days
(missing rows or empty cells) are filled by linear interpolation;
anything longer, a non-monotone date, or a non-numeric cell is an
ingestion error that names the offending row or dates.

Field pack (little-endian throughout):

    magic   4 bytes  b"STNF"
    version u32      1
    P       u32      number of grid points
    T       u32      number of daily frames
    coords  P x 2 f64  (lat, lon) in degrees, point order fixed
    frames  T frames of P f32 values each

Malformed packs raise FormatError naming the byte offset.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass

import numpy as np

from .autodiff import DTYPE
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    IngestionError,
)
from .trunk import normalize_coords

FIELD_PACK_MAGIC = b"STNF"
FIELD_PACK_VERSION = 1
MAX_GAP_DAYS = 3


@dataclass
class SensorSeries:
    """Daily multichannel sensor history: values[t, n] for station n."""

    timestamps: np.ndarray  # [T] datetime64[D], strictly increasing, daily
    station_ids: list
    values: np.ndarray  # [T x N] float64

    def validate(self):
        if self.values.ndim != 2:
            raise DimensionError(f"sensor values must be [T x N], got "
                                 f"{self.values.shape}")
        if len(self.timestamps) != self.values.shape[0]:
            raise DimensionError("timestamp count does not match value rows")
        if len(self.station_ids) != self.values.shape[1]:
            raise DimensionError("station count does not match value columns")
        deltas = np.diff(self.timestamps).astype("timedelta64[D]").astype(int)
        if np.any(deltas != 1):
            raise DataError("sensor timestamps must be consecutive days")
        return self

    @property
    def n_days(self):
        return self.values.shape[0]

    @property
    def n_sensors(self):
        return self.values.shape[1]


@dataclass
class FieldSequence:
    """Daily frames of a scalar field sampled at P fixed grid points."""

    coords_deg: np.ndarray  # [P x 2] (lat, lon) degrees
    values: np.ndarray  # [T x P] float64

    def validate(self):
        if self.coords_deg.ndim != 2 or self.coords_deg.shape[1] != 2:
            raise DimensionError(f"field coords must be [P x 2], got "
                                 f"{self.coords_deg.shape}")
        if self.values.ndim != 2 or self.values.shape[1] != self.coords_deg.shape[0]:
            raise DimensionError(
                f"field values must be [T x {self.coords_deg.shape[0]}], "
                f"got {self.values.shape}"
            )
        return self

    @property
    def n_days(self):
        return self.values.shape[0]

    @property
    def n_points(self):
        return self.coords_deg.shape[0]


@dataclass
class QueryGrid:
    """Fixed set of query points, in degrees, with unique rows."""

    coords_deg: np.ndarray

    def __post_init__(self):
        self.coords_deg = np.asarray(self.coords_deg, dtype=DTYPE)
        if self.coords_deg.ndim != 2 or self.coords_deg.shape[1] != 2:
            raise DimensionError(
                f"grid coords must be [P x 2], got {self.coords_deg.shape}"
            )
        seen = {tuple(row) for row in self.coords_deg}
        if len(seen) != self.coords_deg.shape[0]:
            raise DataError("grid points must be unique")

    @classmethod
    def from_dims(cls, n_lat, n_lon):
        """Cell-centred global grid, latitude-major point order."""
        if n_lat < 1 or n_lon < 1:
            raise ConfigError("grid dimensions must be >= 1")
        lats = -90.0 + (np.arange(n_lat) + 0.5) * (180.0 / n_lat)
        lons = -180.0 + (np.arange(n_lon) + 0.5) * (360.0 / n_lon)
        coords = np.array([(lat, lon) for lat in lats for lon in lons])
        return cls(coords)

    @property
    def n_points(self):
        return self.coords_deg.shape[0]

    def normalized(self):
        return normalize_coords(self.coords_deg)


@dataclass
class WindowPair:
    """One supervised example: history window and its future field block."""

    history: np.ndarray  # [k_hist x N]
    target: np.ndarray  # [P x p x k_fut]
    anchor: int  # day index of the first forecast day

    @property
    def k_fut(self):
        return self.target.shape[2]

    def target_days(self):
        """Half-open day-index range this window is asked to forecast."""
        return self.anchor, self.anchor + self.k_fut


# ---------------------------------------------------------------------------
# Sensor CSV


def load_sensor_csv(path):
    """Read a sensor CSV, interpolating gaps of at most three days."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "date":
            raise IngestionError(
                f"{path}: header must be 'date,<station>,...', got {header!r}"
            )
        station_ids = [name.strip() for name in header[1:]]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {line_no} has {len(row)} cells, "
                    f"expected {len(header)}"
                )
            try:
                day = dt.date.fromisoformat(row[0].strip())
            except ValueError:
                raise IngestionError(
                    f"{path}: row {line_no} has invalid date {row[0]!r}"
                ) from None
            cells = []
            for col, cell in enumerate(row[1:], start=1):
                text = cell.strip()
                if text == "":
                    cells.append(np.nan)
                    continue
                try:
                    cells.append(float(text))
                except ValueError:
                    raise IngestionError(
                        f"{path}: row {line_no}, column '{header[col]}' has "
                        f"non-numeric cell {cell!r}"
                    ) from None
            rows.append((line_no, day, cells))

    if not rows:
        raise IngestionError(f"{path}: no data rows")

    dates, values = _fill_date_gaps(path, rows, len(station_ids))
    values = _interpolate_cells(path, dates, values, station_ids)
    timestamps = np.array([np.datetime64(d, "D") for d in dates])
    return SensorSeries(timestamps, station_ids, values).validate()


def _fill_date_gaps(path, rows, n_cols):
    """Insert NaN rows for missing dates; reject gaps beyond the limit."""
    dates = [rows[0][1]]
    values = [rows[0][2]]
    for (prev_no, prev_day, _), (line_no, day, cells) in zip(rows, rows[1:]):
        step = (day - prev_day).days
        if step <= 0:
            raise IngestionError(
                f"{path}: row {line_no} date {day} is not after {prev_day} "
                f"(row {prev_no})"
            )
        missing = step - 1
        if missing > MAX_GAP_DAYS:
            raise IngestionError(
                f"{path}: {missing}-day gap between {prev_day} and {day} "
                f"exceeds the {MAX_GAP_DAYS}-day interpolation limit"
            )
        for offset in range(1, step):
            dates.append(prev_day + dt.timedelta(days=offset))
            values.append([np.nan] * n_cols)
        dates.append(day)
        values.append(cells)
    return dates, np.array(values, dtype=DTYPE)


def _interpolate_cells(path, dates, values, station_ids):
    """Linearly fill NaN runs of at most MAX_GAP_DAYS per column."""
    for col, station in enumerate(station_ids):
        column = values[:, col]
        missing = np.isnan(column)
        if not missing.any():
            continue
        idx = 0
        n = len(column)
        while idx < n:
            if not missing[idx]:
                idx += 1
                continue
            run_start = idx
            while idx < n and missing[idx]:
                idx += 1
            run_end = idx  # exclusive
            run_len = run_end - run_start
            if run_start == 0 or run_end == n:
                raise IngestionError(
                    f"{path}: station '{station}' has missing values at the "
                    f"series edge ({dates[run_start]})"
                )
            if run_len > MAX_GAP_DAYS:
                raise IngestionError(
                    f"{path}: station '{station}' missing for {run_len} days "
                    f"from {dates[run_start]} to {dates[run_end - 1]}, beyond "
                    f"the {MAX_GAP_DAYS}-day interpolation limit"
                )
            left = column[run_start - 1]
            right = column[run_end]
            for j in range(run_len):
                frac = (j + 1) / (run_len + 1)
                column[run_start + j] = left + (right - left) * frac
    return values


def save_sensor_csv(path, series):
    """Write a SensorSeries in the ingestion format (no gaps)."""
    series.validate()
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["date"] + list(series.station_ids))
        for ts, row in zip(series.timestamps, series.values):
            day = ts.astype(dt.date).isoformat()
            writer.writerow([day] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Field pack


def save_field_pack(path, fields):
    """Write a FieldSequence in the binary layout described above."""
    fields.validate()
    p_count = fields.n_points
    t_count = fields.n_days
    with open(path, "wb") as handle:
        handle.write(FIELD_PACK_MAGIC)
        np.array([FIELD_PACK_VERSION, p_count, t_count],
                 dtype="<u4").tofile(handle)
        np.ascontiguousarray(fields.coords_deg, dtype="<f8").tofile(handle)
        np.ascontiguousarray(fields.values, dtype="<f4").tofile(handle)


def load_field_pack(path):
    """Read a field pack; errors carry the byte offset of the problem."""
    with open(path, "rb") as handle:
        raw = handle.read()

    def need(count, offset, what):
        if offset + count > len(raw):
            raise FormatError(
                f"{path}: truncated while reading {what} at byte {offset} "
                f"(need {count} bytes, file has {len(raw) - offset})"
            )

    offset = 0
    need(4, offset, "magic")
    if raw[:4] != FIELD_PACK_MAGIC:
        raise FormatError(
            f"{path}: bad magic {raw[:4]!r} at byte 0, expected "
            f"{FIELD_PACK_MAGIC!r}"
        )
    offset = 4
    need(12, offset, "header")
    version, p_count, t_count = np.frombuffer(raw, dtype="<u4", count=3,
                                              offset=offset)
    if version != FIELD_PACK_VERSION:
        raise FormatError(
            f"{path}: unsupported version {version} at byte 4, expected "
            f"{FIELD_PACK_VERSION}"
        )
    offset += 12
    coord_bytes = int(p_count) * 2 * 8
    need(coord_bytes, offset, "coordinates")
    coords = np.frombuffer(raw, dtype="<f8", count=int(p_count) * 2,
                           offset=offset).reshape(int(p_count), 2)
    offset += coord_bytes
    frame_bytes = int(t_count) * int(p_count) * 4
    need(frame_bytes, offset, "frames")
    frames = np.frombuffer(raw, dtype="<f4", count=int(t_count) * int(p_count),
                           offset=offset).reshape(int(t_count), int(p_count))
    offset += frame_bytes
    if offset != len(raw):
        raise FormatError(
            f"{path}: {len(raw) - offset} trailing bytes after byte {offset}"
        )
    return FieldSequence(
        coords_deg=coords.astype(DTYPE),
        values=frames.astype(DTYPE),
    ).validate()


# ---------------------------------------------------------------------------
# Windows and splits


def make_windows(sensors, fields, k_hist, k_fut):
    """Slide a (k_hist, k_fut) window over aligned series, stride 1.

    Yields T - k_hist - k_fut + 1 pairs; the anchor is the day index of
    each pair's first forecast day.
    """
    if k_hist < 1 or k_fut < 1:
        raise ConfigError("k_hist and k_fut must be >= 1")
    t_total = sensors.n_days
    if fields.n_days != t_total:
        raise DimensionError(
            f"sensor series covers {t_total} days but field series covers "
            f"{fields.n_days}"
        )
    if k_hist + k_fut > t_total:
        raise ConfigError(
            f"k_hist ({k_hist}) + k_fut ({k_fut}) exceeds the series length "
            f"({t_total})"
        )
    pairs = []
    for start in range(t_total - k_hist - k_fut + 1):
        anchor = start + k_hist
        history = sensors.values[start:anchor].copy()
        block = fields.values[anchor:anchor + k_fut]  # [k_fut x P]
        target = np.ascontiguousarray(block.T)[:, None, :]  # [P x 1 x k_fut]
        pairs.append(WindowPair(history, target, anchor))
    return pairs


@dataclass
class Splits:
    """Chronological train/val/test window pairs, leakage-guarded."""

    train: list
    val: list
    test: list
    dropped_train: int = 0

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)


def chrono_split(pairs, fractions=(0.45, 0.10, 0.45)):
    """Split windows chronologically, then apply the leakage guard.

    Sizes before the guard are floor(f0*W), floor(f1*W), remainder.
    The guard removes every training window whose target days reach
    into the forecast territory of the later splits (any day at or
    after the first validation anchor): nothing the optimizer fits is a
    day a later split is asked to predict. Validation and test windows
    are never dropped. Any empty split is a config error.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be three positive numbers, got "
                          f"{fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    w = len(pairs)
    n_train = int(np.floor(fractions[0] * w))
    n_val = int(np.floor(fractions[1] * w))
    ordered = sorted(pairs, key=lambda pair: pair.anchor)
    train = ordered[:n_train]
    val = ordered[n_train:n_train + n_val]
    test = ordered[n_train + n_val:]
    if not train or not val or not test:
        raise ConfigError(
            f"split of {w} windows leaves an empty part "
            f"(sizes {len(train)}/{len(val)}/{len(test)})"
        )
    boundary = val[0].anchor
    kept = [pair for pair in train if pair.target_days()[1] <= boundary]
    dropped = len(train) - len(kept)
    if not kept:
        raise ConfigError(
            "leakage guard removed every training window; the series is too "
            "short for this k_fut and split"
        )
    return Splits(kept, val, test, dropped_train=dropped)


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormStats:
    """Z-score statistics fitted on the training split only.

    Standard deviations are population (divide by n) statistics.
    """

    sensor_mean: np.ndarray  # [N]
    sensor_std: np.ndarray  # [N]
    target_mean: float
    target_std: float

    def apply_sensors(self, values):
        return (np.asarray(values, dtype=DTYPE) - self.sensor_mean) / self.sensor_std

    def invert_sensors(self, values):
        return np.asarray(values, dtype=DTYPE) * self.sensor_std + self.sensor_mean

    def apply_target(self, values):
        return (np.asarray(values, dtype=DTYPE) - self.target_mean) / self.target_std

    def invert_target(self, values):
        return np.asarray(values, dtype=DTYPE) * self.target_std + self.target_mean

    def to_dict(self):
        return {
            "sensor_mean": [float(v) for v in self.sensor_mean],
            "sensor_std": [float(v) for v in self.sensor_std],
            "target_mean": float(self.target_mean),
            "target_std": float(self.target_std),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            sensor_mean=np.asarray(data["sensor_mean"], dtype=DTYPE),
            sensor_std=np.asarray(data["sensor_std"], dtype=DTYPE),
            target_mean=float(data["target_mean"]),
            target_std=float(data["target_std"]),
        )


def fit_norm_stats(train_pairs):
    """Per-sensor and target z-score stats from training windows alone."""
    if not train_pairs:
        raise ConfigError("cannot fit normalization stats on an empty split")
    histories = np.concatenate([pair.history for pair in train_pairs], axis=0)
    targets = np.concatenate(
        [pair.target.reshape(-1) for pair in train_pairs]
    )
    sensor_mean = histories.mean(axis=0)
    sensor_std = histories.std(axis=0)  # population
    for channel, std in enumerate(sensor_std):
        if std == 0.0:
            raise DataError(
                f"sensor channel {channel} has zero variance in the training "
                f"split; cannot normalize"
            )
    target_std = targets.std()
    if target_std == 0.0:
        raise DataError("target channel has zero variance in the training split")
    return NormStats(sensor_mean, sensor_std, float(targets.mean()),
                     float(target_std))


def normalize_pairs(pairs, stats):
    """Return new WindowPairs with z-scored history and target."""
    out = []
    for pair in pairs:
        out.append(WindowPair(
            history=stats.apply_sensors(pair.history),
            target=stats.apply_target(pair.target),
            anchor=pair.anchor,
        ))
    return out


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the synthetic dataset; defaults keep sensors' correlation
    with the driver above 0.9 and the field strictly positive."""

    seed: int
    n_sensors: int
    grid: tuple
    t_total: int
    cycles: float = 2.0
    driver_ar_rho: float = 0.9
    driver_ar_sigma: float = 0.03
    sensor_noise: float = 0.2
    gain_range: tuple = (0.8, 1.25)
    base_level: float = 2.0
    modulation: float = 0.5


def synth_generate(spec):
    """Build a coupled sensor/field dataset from one latent driver.

    The driver is a slow sinusoid plus AR(1) noise. Sensors read the
    driver through a per-station gain, offset, and i.i.d. noise. The
    field is a deterministic function of the driver: a latitude bowl
    (stronger toward the poles) times a level that moves against the
    driver. Returns (sensors, fields, driver_trace).
    """
    if spec.t_total < 2:
        raise ConfigError("synthetic series needs at least 2 days")
    if spec.n_sensors < 1:
        raise ConfigError("need at least one sensor")
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.t_total, dtype=DTYPE)

    period = spec.t_total / float(spec.cycles)
    driver = np.sin(2.0 * np.pi * t / period)
    ar = 0.0
    noise = rng.normal(0.0, spec.driver_ar_sigma, size=spec.t_total)
    for i in range(spec.t_total):
        ar = spec.driver_ar_rho * ar + noise[i]
        driver[i] += ar

    gains = rng.uniform(spec.gain_range[0], spec.gain_range[1],
                        size=spec.n_sensors)
    offsets = rng.uniform(-0.5, 0.5, size=spec.n_sensors)
    readings = (offsets[None, :] + driver[:, None] * gains[None, :]
                + rng.normal(0.0, spec.sensor_noise,
                             size=(spec.t_total, spec.n_sensors)))

    start = np.datetime64("2001-01-01", "D")
    timestamps = start + np.arange(spec.t_total)
    station_ids = [f"station_{i + 1}" for i in range(spec.n_sensors)]
    sensors = SensorSeries(timestamps, station_ids, readings).validate()

    grid = QueryGrid.from_dims(*spec.grid)
    norm = grid.normalized()
    bowl = 1.0 + 3.0 * (2.0 * norm[:, 0] - 1.0) ** 2
    ripple = 1.0 + 0.05 * np.sin(2.0 * np.pi * norm[:, 1])
    shape = bowl * ripple  # [P]
    level = spec.base_level - spec.modulation * driver  # [T]
    field_values = level[:, None] * shape[None, :]
    fields = FieldSequence(grid.coords_deg, field_values).validate()
    return sensors, fields, driver
