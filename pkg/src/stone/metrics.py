"""Forecast-quality metrics, per-lead profiles, and CSV report views.

All metrics treat the first argument as the reference (truth) and the
second as the prediction, and operate on physical units. Relative L2 is
reported as a fraction, MAPE as a percentage with near-zero reference
points excluded (and counted).
"""

import dataclasses

import numpy as np

from .autodiff import DTYPE
from .errors import ConfigError, DimensionError, UndefinedMetricError
from .trunk import normalize_coords

MAPE_FLOOR = 1e-9


def _paired(y, yhat):
    y = np.asarray(y, dtype=DTYPE)
    yhat = np.asarray(yhat, dtype=DTYPE)
    if y.shape != yhat.shape:
        raise DimensionError(
            f"metric inputs must have equal shapes, got {y.shape} vs {yhat.shape}"
        )
    if y.size == 0:
        raise UndefinedMetricError("metric over an empty array is undefined")
    return y.ravel(), yhat.ravel()


def rel_l2(y, yhat):
    """||yhat - y|| / ||y|| as a fraction; undefined for a zero reference."""
    y, yhat = _paired(y, yhat)
    denom = float(np.linalg.norm(y))
    if denom == 0.0:
        raise UndefinedMetricError(
            "relative L2 is undefined: reference field has zero norm"
        )
    return float(np.linalg.norm(yhat - y)) / denom


def rmse(y, yhat):
    y, yhat = _paired(y, yhat)
    return float(np.sqrt(np.mean((yhat - y) ** 2)))


def mae(y, yhat):
    y, yhat = _paired(y, yhat)
    return float(np.mean(np.abs(yhat - y)))


def mape(y, yhat, floor=MAPE_FLOOR):
    """Mean absolute percentage error over points with |y| >= floor.

    Returns (percentage, n_excluded). Raises when every point is
    excluded: a percentage over nothing is undefined.
    """
    y, yhat = _paired(y, yhat)
    keep = np.abs(y) >= floor
    n_kept = int(np.count_nonzero(keep))
    n_excluded = y.size - n_kept
    if n_kept == 0:
        raise UndefinedMetricError(
            "MAPE is undefined: every reference point is below the "
            f"magnitude floor {floor}"
        )
    value = 100.0 * float(np.mean(np.abs(y[keep] - yhat[keep]) / np.abs(y[keep])))
    return value, n_excluded


def _as_lead_batches(y):
    y = np.asarray(y, dtype=DTYPE)
    if y.ndim == 3:
        y = y[None, ...]
    if y.ndim != 4:
        raise DimensionError(
            f"expected [n x points x channels x leads] (or one sample without "
            f"the batch axis), got shape {y.shape}"
        )
    return y


@dataclasses.dataclass
class MetricReport:
    """Per-lead metric profile for one model on one dataset."""

    model: str
    leads: np.ndarray
    rel_l2: np.ndarray
    rmse: np.ndarray
    mae: np.ndarray
    mape: np.ndarray
    excluded: np.ndarray

    COLUMNS = ("model", "lead", "rel_l2", "rmse", "mae", "mape",
               "excluded_points")

    def n_leads(self):
        return len(self.leads)

    def aggregates(self):
        """Mean of each metric across leads (excluded points are summed)."""
        return {
            "rel_l2": float(np.mean(self.rel_l2)),
            "rmse": float(np.mean(self.rmse)),
            "mae": float(np.mean(self.mae)),
            "mape": float(np.mean(self.mape)),
            "excluded_points": int(np.sum(self.excluded)),
        }

    def row_for_lead(self, lead):
        i = int(np.nonzero(self.leads == lead)[0][0])
        return {
            "rel_l2": float(self.rel_l2[i]),
            "rmse": float(self.rmse[i]),
            "mae": float(self.mae[i]),
            "mape": float(self.mape[i]),
            "excluded_points": int(self.excluded[i]),
        }

    def to_csv(self):
        lines = [",".join(self.COLUMNS)]
        for i, lead in enumerate(self.leads):
            lines.append(
                f"{self.model},{int(lead)},{float(self.rel_l2[i])!r},"
                f"{float(self.rmse[i])!r},{float(self.mae[i])!r},"
                f"{float(self.mape[i])!r},{int(self.excluded[i])}"
            )
        return "\n".join(lines) + "\n"


def per_lead_profile(model_name, y, yhat, floor=MAPE_FLOOR):
    """Metric profile with one row per forecast lead (1-based)."""
    y = _as_lead_batches(y)
    yhat = _as_lead_batches(yhat)
    if y.shape != yhat.shape:
        raise DimensionError(
            f"metric inputs must have equal shapes, got {y.shape} vs {yhat.shape}"
        )
    k_fut = y.shape[-1]
    rows = {"rel_l2": [], "rmse": [], "mae": [], "mape": [], "excluded": []}
    for k in range(k_fut):
        yk, yhk = y[..., k], yhat[..., k]
        rows["rel_l2"].append(rel_l2(yk, yhk))
        rows["rmse"].append(rmse(yk, yhk))
        rows["mae"].append(mae(yk, yhk))
        pct, excluded = mape(yk, yhk, floor)
        rows["mape"].append(pct)
        rows["excluded"].append(excluded)
    return MetricReport(
        model=model_name,
        leads=np.arange(1, k_fut + 1),
        rel_l2=np.array(rows["rel_l2"]),
        rmse=np.array(rows["rmse"]),
        mae=np.array(rows["mae"]),
        mape=np.array(rows["mape"]),
        excluded=np.array(rows["excluded"], dtype=int),
    )


def heatmap_csv(reports):
    """Lead-by-model grid of relative L2: one row per model, K lead columns."""
    if not reports:
        raise ConfigError("heatmap needs at least one report")
    k_fut = reports[0].n_leads()
    for rep in reports:
        if rep.n_leads() != k_fut:
            raise ConfigError(
                "heatmap needs a common lead count, got "
                f"{rep.n_leads()} for '{rep.model}' vs {k_fut}"
            )
    header = "model," + ",".join(f"lead_{k}" for k in range(1, k_fut + 1))
    lines = [header]
    for rep in reports:
        lines.append(rep.model + "," + ",".join(repr(float(v)) for v in rep.rel_l2))
    return "\n".join(lines) + "\n"


def comparison_leads(k_fut):
    """Representative leads: first, then six evenly spaced through the horizon."""
    if k_fut < 1:
        raise ConfigError(f"lead count must be positive, got {k_fut}")
    picks = [1] + [min(k_fut, max(1, round(i * k_fut / 6))) for i in range(1, 7)]
    return sorted(set(picks))


def region_metrics(y, yhat, coords_deg, lat_range, lon_range, floor=MAPE_FLOOR):
    """Metrics restricted to grid points inside a closed lat/lon box."""
    y = _as_lead_batches(y)
    yhat = _as_lead_batches(yhat)
    coords_deg = np.asarray(coords_deg, dtype=DTYPE)
    if coords_deg.ndim != 2 or coords_deg.shape[1] != 2:
        raise DimensionError(
            f"coords must be [points x 2] degrees, got {coords_deg.shape}"
        )
    if y.shape[1] != coords_deg.shape[0]:
        raise DimensionError(
            f"field has {y.shape[1]} points but coords describe "
            f"{coords_deg.shape[0]}"
        )
    lat_lo, lat_hi = lat_range
    lon_lo, lon_hi = lon_range
    lat, lon = coords_deg[:, 0], coords_deg[:, 1]
    mask = (lat >= lat_lo) & (lat <= lat_hi) & (lon >= lon_lo) & (lon <= lon_hi)
    n_sel = int(np.count_nonzero(mask))
    if n_sel == 0:
        raise ConfigError(
            f"no grid points inside lat {lat_range}, lon {lon_range}"
        )
    ys, yhs = y[:, mask], yhat[:, mask]
    pct, excluded = mape(ys, yhs, floor)
    return {
        "n_points": n_sel,
        "rel_l2": rel_l2(ys, yhs),
        "rmse": rmse(ys, yhs),
        "mae": mae(ys, yhs),
        "mape": pct,
        "excluded_points": excluded,
    }


def evaluate_on_pairs(model, pairs, coords_deg, model_name, floor=MAPE_FLOOR):
    """Per-lead report for a model over windows, in physical units.

    Histories are normalized with the model's stored stats, the batched
    forecast is mapped back to physical units, and metrics compare it
    against the raw targets.
    """
    if not pairs:
        raise ConfigError("cannot evaluate on an empty window list")
    if model.norm_stats is None:
        raise ConfigError("model has no normalization stats; train or load first")
    coords = normalize_coords(np.asarray(coords_deg, dtype=DTYPE))
    hist = np.stack([model.norm_stats.apply_sensors(p.history) for p in pairs])
    truth = np.stack([p.target for p in pairs])
    pred_norm = model.forward(hist, coords).value
    pred = model.norm_stats.invert_target(pred_norm)
    return per_lead_profile(model_name, truth, pred, floor)
