"""Command-line interface: synth | train | eval | forecast | gradcheck.

Exit codes: 0 success, 2 configuration problems, 3 data problems,
4 numerical problems. Run configurations are JSON documents validated
against a schema that rejects unknown keys; omitted keys fall back to
the defaults below.
"""

import argparse
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, ParamStore, grad_check
from .branches import BRANCH_KINDS, BranchConfig, build_branch
from .checkpoint import load_checkpoint
from .data import (
    FieldSequence,
    QueryGrid,
    SynthSpec,
    chrono_split,
    load_field_pack,
    load_sensor_csv,
    make_windows,
    save_field_pack,
    save_sensor_csv,
    synth_generate,
)
from .errors import (
    ConfigError,
    DataError,
    IngestionError,
    NumericalError,
)
from .layers import AttentionBlock, DenseLayer, GruCell, LstmCell, layer_norm
from .metrics import comparison_leads, evaluate_on_pairs, heatmap_csv, per_lead_profile
from .operator import build_model
from .training import TrainConfig, train
from .trunk import TrunkConfig

GRADCHECK_TOLERANCE = 1e-4

RUN_CONFIG_DEFAULTS = {
    "model": {
        "branch": "gru",
        "q": 128,
        "depth": 3,
        "heads": 8,
        "trunk_hidden": 128,
        "trunk_layers": 2,
        "k_hist": 180,
        "k_fut": 180,
        "channels": 1,
    },
    "split": {"train": 0.45, "val": 0.10, "test": 0.45},
    "training": {
        "lr0": 1e-3,
        "batch_size": 8,
        "max_epochs": 500,
        "seed": 0,
        "plateau_factor": 0.5,
        "plateau_patience": 5,
        "plateau_threshold": 1e-4,
        "lr_min": 1e-7,
        "early_stop_patience": 10,
    },
    "out_dir": "runs",
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sensors", "fields"],
            "properties": {
                "sensors": {"type": "string"},
                "fields": {"type": "string"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "branch": {"enum": sorted(BRANCH_KINDS)},
                "q": {"type": "integer", "minimum": 1},
                "depth": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "trunk_hidden": {"type": "integer", "minimum": 1},
                "trunk_layers": {"type": "integer", "minimum": 1},
                "k_hist": {"type": "integer", "minimum": 1},
                "k_fut": {"type": "integer", "minimum": 1},
                "channels": {"type": "integer", "minimum": 1},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train": {"type": "number", "exclusiveMinimum": 0},
                "val": {"type": "number", "exclusiveMinimum": 0},
                "test": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr0": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "plateau_factor": {
                    "type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1,
                },
                "plateau_patience": {"type": "integer", "minimum": 1},
                "plateau_threshold": {"type": "number", "minimum": 0},
                "lr_min": {"type": "number", "exclusiveMinimum": 0},
                "early_stop_patience": {"type": "integer", "minimum": 1},
            },
        },
        "out_dir": {"type": "string"},
    },
}


def load_run_config(path):
    """Read, validate, and default-fill a run configuration."""
    if not os.path.isfile(path):
        raise ConfigError(f"run config not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(
            f"run config {path} is invalid at {where}: {exc.message}"
        ) from exc
    merged = {"data": dict(raw["data"]), "out_dir": raw.get("out_dir", RUN_CONFIG_DEFAULTS["out_dir"])}
    for section in ("model", "split", "training"):
        merged[section] = dict(RUN_CONFIG_DEFAULTS[section])
        merged[section].update(raw.get(section, {}))
    return merged


def _parse_grid(text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"grid must look like '8x16', got '{text}'")
    try:
        n_lat, n_lon = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"grid must look like '8x16', got '{text}'") from exc
    if n_lat < 1 or n_lon < 1:
        raise ConfigError(f"grid dimensions must be positive, got '{text}'")
    return n_lat, n_lon


def _require_file(path, what):
    if not os.path.isfile(path):
        raise IngestionError(f"{what} not found: {path}")
    return path


def _load_dataset(data_dir):
    sensors = load_sensor_csv(_require_file(
        os.path.join(data_dir, "sensors.csv"), "sensor CSV"))
    fields = load_field_pack(_require_file(
        os.path.join(data_dir, "field.stnf"), "field pack"))
    if sensors.n_days != fields.n_days:
        raise DataError(
            f"sensor series covers {sensors.n_days} days but field pack "
            f"covers {fields.n_days}"
        )
    return sensors, fields


def _load_coords_csv(path):
    with open(_require_file(path, "coordinate CSV"), "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "lat,lon":
        raise IngestionError(f"{path}: expected header 'lat,lon'")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise IngestionError(f"{path}:{i}: expected 'lat,lon', got '{line}'")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise IngestionError(f"{path}:{i}: non-numeric coordinate") from exc
    if not rows:
        raise IngestionError(f"{path}: no coordinate rows")
    return np.array(rows, dtype=DTYPE)


# ---------------------------------------------------------------- synth

def _cmd_synth(args):
    grid = _parse_grid(args.grid)
    spec = SynthSpec(seed=args.seed, n_sensors=args.sensors, grid=grid,
                     t_total=args.days, cycles=args.cycles)
    sensors, fields, driver = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    sensors_path = os.path.join(args.out, "sensors.csv")
    fields_path = os.path.join(args.out, "field.stnf")
    manifest_path = os.path.join(args.out, "manifest.json")
    save_sensor_csv(sensors_path, sensors)
    save_field_pack(fields_path, fields)
    manifest = {
        "seed": args.seed,
        "n_sensors": args.sensors,
        "grid": list(grid),
        "days": args.days,
        "cycles": args.cycles,
        "stations": list(sensors.station_ids),
        "driver": [float(v) for v in driver],
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {sensors_path}, {fields_path}, {manifest_path}")
    print(f"  {args.sensors} sensors x {args.days} days, "
          f"{grid[0]}x{grid[1]} grid ({grid[0] * grid[1]} points)")
    return 0


# ---------------------------------------------------------------- train

def _branch_kinds_for(args, cfg):
    if args.branch is None:
        return [cfg["model"]["branch"]]
    if args.branch == "all":
        return ["fcn", "gru", "lstm", "transformer"]
    return [args.branch]


def _cmd_train(args):
    cfg = load_run_config(args.config)
    sensors = load_sensor_csv(_require_file(cfg["data"]["sensors"], "sensor CSV"))
    fields = load_field_pack(_require_file(cfg["data"]["fields"], "field pack"))
    model_cfg = cfg["model"]
    pairs = make_windows(sensors, fields, model_cfg["k_hist"], model_cfg["k_fut"])
    fractions = (cfg["split"]["train"], cfg["split"]["val"], cfg["split"]["test"])
    splits = chrono_split(pairs, fractions)
    n_train, n_val, n_test = len(splits.train), len(splits.val), len(splits.test)
    print(f"windows: {len(pairs)} total -> {n_train} train / {n_val} val / "
          f"{n_test} test ({splits.dropped_train} dropped by the leakage guard)")

    tr = cfg["training"]
    tcfg = TrainConfig(
        lr0=tr["lr0"], plateau_factor=tr["plateau_factor"],
        plateau_patience=tr["plateau_patience"],
        plateau_threshold=tr["plateau_threshold"], lr_min=tr["lr_min"],
        early_stop_patience=tr["early_stop_patience"],
        max_epochs=tr["max_epochs"], batch_size=tr["batch_size"],
        seed=tr["seed"],
    )
    out_dir = args.out or cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    for kind in _branch_kinds_for(args, cfg):
        branch_cfg = BranchConfig(
            kind=kind, n_sensors=sensors.n_sensors, k_hist=model_cfg["k_hist"],
            q=model_cfg["q"], depth=model_cfg["depth"], heads=model_cfg["heads"],
        )
        trunk_cfg = TrunkConfig(
            q=model_cfg["q"], k_fut=model_cfg["k_fut"],
            p=model_cfg["channels"], hidden=model_cfg["trunk_hidden"],
            layers=model_cfg["trunk_layers"],
        )
        model = build_model(branch_cfg, trunk_cfg, seed=tr["seed"])
        print(f"{kind}: {model.parameter_count()} parameters")
        ckpt_path = os.path.join(out_dir, f"{kind}.stnc")
        result = train(model, splits, fields.coords_deg, tcfg,
                       checkpoint_path=ckpt_path)
        log_path = os.path.join(out_dir, f"{kind}_train_log.csv")
        result.log.save(log_path)
        print(f"{kind}: best val_loss {result.best_val_loss:.6e} at epoch "
              f"{result.best_epoch}; ran {result.epochs_run} epochs "
              f"(early stop: {result.stopped_early}); "
              f"wrote {ckpt_path} and {log_path}")
    return 0


# ----------------------------------------------------------------- eval

def _parse_split(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--split needs 'train,val,test' fractions, got '{text}'")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"--split fractions must be numbers, got '{text}'") from exc


def _cmd_eval(args):
    sensors, fields = _load_dataset(args.data)
    fractions = _parse_split(args.split)
    os.makedirs(args.out, exist_ok=True)
    reports = []
    for ckpt in args.checkpoint:
        model, _meta = load_checkpoint(_require_file(ckpt, "checkpoint"))
        name = os.path.splitext(os.path.basename(ckpt))[0]
        pairs = make_windows(sensors, fields, model.k_hist, model.k_fut)
        splits = chrono_split(pairs, fractions)
        report = evaluate_on_pairs(model, splits.test, fields.coords_deg, name)
        reports.append(report)
        report_path = os.path.join(args.out, f"report_{name}.csv")
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        agg = report.aggregates()
        print(f"{name}: test rel_l2 {agg['rel_l2']:.4f}  rmse {agg['rmse']:.4f}  "
              f"mae {agg['mae']:.4f}  mape {agg['mape']:.2f}% "
              f"({agg['excluded_points']} excluded); wrote {report_path}")
        if args.debug_identity:
            truth = np.stack([p.target for p in splits.test])
            identity = per_lead_profile(f"{name}_identity", truth, truth)
            ident_path = os.path.join(args.out, f"report_{name}_identity.csv")
            with open(ident_path, "w", encoding="utf-8") as fh:
                fh.write(identity.to_csv())
            flat = (np.all(identity.rel_l2 == 0.0) and np.all(identity.rmse == 0.0)
                    and np.all(identity.mae == 0.0) and np.all(identity.mape == 0.0))
            if not flat:
                raise NumericalError(
                    "identity check failed: truth-vs-truth metrics are not zero"
                )
            print(f"{name}: identity check ok (all-zero report); wrote {ident_path}")

    heatmap_path = os.path.join(args.out, "heatmap.csv")
    with open(heatmap_path, "w", encoding="utf-8") as fh:
        fh.write(heatmap_csv(reports))

    k_fut = reports[0].n_leads()
    leads = comparison_leads(k_fut)
    comparison_path = os.path.join(args.out, "comparison.csv")
    lines = ["model,lead,rel_l2,rmse,mae,mape,excluded_points"]
    for report in reports:
        for lead in leads:
            row = report.row_for_lead(lead)
            lines.append(
                f"{report.model},{lead},{row['rel_l2']!r},{row['rmse']!r},"
                f"{row['mae']!r},{row['mape']!r},{row['excluded_points']}"
            )
    with open(comparison_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"comparison leads {leads}; wrote {heatmap_path} and {comparison_path}")
    return 0


# ------------------------------------------------------------- forecast

def _cmd_forecast(args):
    if (args.grid is None) == (args.coords is None):
        raise ConfigError("pass exactly one of --grid or --coords")
    model, _meta = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    if model.norm_stats is None:
        raise ConfigError(
            "checkpoint has no normalization stats; it was never trained"
        )
    if model.trunk_cfg.p != 1:
        raise ConfigError(
            "the forecast CSV lists one value per (lat, lon, lead); "
            f"this model carries {model.trunk_cfg.p} channels"
        )
    window_series = load_sensor_csv(_require_file(args.window, "window CSV"))
    if window_series.n_days != model.k_hist:
        raise DataError(
            f"forecast window must have exactly {model.k_hist} rows, "
            f"got {window_series.n_days}"
        )
    if window_series.n_sensors != model.branch_cfg.n_sensors:
        raise DataError(
            f"forecast window must have {model.branch_cfg.n_sensors} sensor "
            f"columns, got {window_series.n_sensors}"
        )
    if args.grid is not None:
        grid = QueryGrid.from_dims(*_parse_grid(args.grid))
        coords_deg = grid.coords_deg
    else:
        coords_deg = _load_coords_csv(args.coords)
        QueryGrid(coords_deg)  # uniqueness and range checks

    window_norm = model.norm_stats.apply_sensors(window_series.values)
    from .trunk import normalize_coords
    coords = normalize_coords(coords_deg)
    tic = time.perf_counter()
    field = model.forecast_single_pass(window_norm, coords)
    wall_ms = (time.perf_counter() - tic) * 1000.0

    os.makedirs(args.out, exist_ok=True)
    pack_path = os.path.join(args.out, "forecast.stnf")
    # one frame per lead: frame k holds the field forecast k days ahead
    frames = field[:, 0, :].T.copy()
    save_field_pack(pack_path, FieldSequence(coords_deg, frames))
    csv_path = os.path.join(args.out, "forecast.csv")
    lines = ["lat,lon,lead,value"]
    for k in range(field.shape[2]):
        for r in range(coords_deg.shape[0]):
            lines.append(
                f"{float(coords_deg[r, 0])!r},{float(coords_deg[r, 1])!r},"
                f"{k + 1},{float(field[r, 0, k])!r}"
            )
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"forecast of {field.shape[2]} lead(s) at {coords_deg.shape[0]} "
          f"points in {wall_ms:.2f} ms; wrote {pack_path} and {csv_path}")
    return 0


# ------------------------------------------------------------ gradcheck

def _gradcheck_cases():
    """Small fixed problems covering every differentiable building block."""
    cases = []
    rng = np.random.default_rng(1234)

    store = ParamStore()
    dense = DenseLayer(store, "dense", 3, 2, rng, activation="relu")
    x_dense = rng.normal(size=(2, 3))
    cases.append(("dense_relu", store,
                  lambda _s: ad.sum_all(ad.power(dense.forward(x_dense), 2))))

    store = ParamStore()
    scale = store.create("ln.scale", rng.normal(1.0, 0.1, size=4))
    shift = store.create("ln.shift", rng.normal(0.0, 0.1, size=4))
    x_ln = rng.normal(size=(3, 4))
    cases.append(("layer_norm", store,
                  lambda _s: ad.sum_all(ad.power(
                      layer_norm(ad.as_node(x_ln), scale, shift), 2))))

    store = ParamStore()
    gru = GruCell(store, "gru", 2, 3, rng)

    def f_gru(_s):
        h = ad.as_node(np.zeros((1, 3)))
        for t in range(2):
            h = gru.step(ad.as_node(x_gru[t]), h)
        return ad.sum_all(ad.power(h, 2))

    x_gru = rng.normal(size=(2, 1, 2))
    cases.append(("gru_cell", store, f_gru))

    store = ParamStore()
    lstm = LstmCell(store, "lstm", 2, 3, rng)

    def f_lstm(_s):
        h = ad.as_node(np.zeros((1, 3)))
        c = ad.as_node(np.zeros((1, 3)))
        for t in range(2):
            h, c = lstm.step(ad.as_node(x_lstm[t]), h, c)
        return ad.sum_all(ad.power(h, 2))

    x_lstm = rng.normal(size=(2, 1, 2))
    cases.append(("lstm_cell", store, f_lstm))

    store = ParamStore()
    attn = AttentionBlock(store, "attn", 4, 2, rng)
    x_attn = rng.normal(size=(3, 4))
    cases.append(("attention_block", store,
                  lambda _s: ad.sum_all(ad.power(attn.forward(x_attn), 2))))

    coords = np.array([[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])
    histories = rng.normal(size=(2, 4, 2))
    for kind in ("fcn", "gru", "lstm", "transformer"):
        branch_cfg = BranchConfig(kind=kind, n_sensors=2, k_hist=4, q=4,
                                  depth=1, heads=2)
        trunk_cfg = TrunkConfig(q=4, k_fut=2, p=1, hidden=4, layers=1)
        model = build_model(branch_cfg, trunk_cfg, seed=5)

        def f_model(_s, _model=model):
            return ad.sum_all(ad.power(_model.forward(histories, coords), 2))

        cases.append((f"model_{kind}", model.store, f_model))
    return cases


def _cmd_gradcheck(args):
    failures = 0
    for name, store, f in _gradcheck_cases():
        err = grad_check(f, store, eps=args.eps)
        ok = err < GRADCHECK_TOLERANCE
        failures += 0 if ok else 1
        print(f"{name:<18s} max_rel_err={err:.3e}  "
              f"{'PASS' if ok else 'FAIL'}")
    if failures:
        raise NumericalError(
            f"{failures} gradient check(s) at or above {GRADCHECK_TOLERANCE}"
        )
    print("all gradient checks passed")
    return 0


# ----------------------------------------------------------------- main

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="stone",
        description=("Operator-learning forecaster: sparse sensor history in, "
                     "dense future field out, one pass."),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a coupled sensor/field dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sensors", type=int, required=True)
    p.add_argument("--grid", required=True, help="lat x lon, e.g. 8x16")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--cycles", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train one or all branch variants")
    p.add_argument("--config", required=True)
    p.add_argument("--branch", choices=sorted(BRANCH_KINDS) + ["all"])
    p.add_argument("--out", help="override the config's out_dir")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on the test split")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", required=True,
                   help="directory with sensors.csv and field.stnf")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="0.45,0.10,0.45")
    p.add_argument("--debug-identity", action="store_true",
                   help="also write truth-vs-truth reports (must be all zero)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("forecast", help="one full forecast from one window")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", required=True,
                   help="sensor CSV with exactly k_hist rows")
    p.add_argument("--grid", help="lat x lon, e.g. 8x16")
    p.add_argument("--coords", help="CSV with a lat,lon header")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_forecast)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of every building block")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
