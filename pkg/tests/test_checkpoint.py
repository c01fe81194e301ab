"""Checkpoint format tests: round trips and corruption handling."""

import numpy as np
import numpy.testing as npt
import pytest

from stone import autodiff as ad
from stone.branches import BranchConfig
from stone.checkpoint import (
    CHECKPOINT_MAGIC,
    save_checkpoint,
    load_checkpoint,
)
from stone.data import NormStats
from stone.errors import FormatError
from stone.operator import build_model
from stone.trunk import TrunkConfig


def _model(seed=5, kind="gru"):
    model = build_model(
        BranchConfig(kind, n_sensors=2, k_hist=3, q=4, depth=1, heads=2),
        TrunkConfig(q=4, k_fut=2, p=1, hidden=6, layers=2),
        seed=seed,
    )
    model.norm_stats = NormStats(
        sensor_mean=np.array([0.5, -0.5]),
        sensor_std=np.array([1.5, 2.5]),
        target_mean=3.0,
        target_std=0.75,
    )
    return model


def test_round_trip_parameters_bit_identical(tmp_path):
    model = _model()
    path = tmp_path / "model.stnc"
    save_checkpoint(path, model, meta={"label": "gru"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"label": "gru"}
    assert loaded.branch_cfg == model.branch_cfg
    assert loaded.trunk_cfg == model.trunk_cfg
    assert loaded.store.names() == model.store.names()
    for name in model.store.names():
        assert (loaded.store[name].value.tobytes()
                == model.store[name].value.tobytes())
    assert loaded.norm_stats.to_dict() == model.norm_stats.to_dict()


def test_save_load_save_bytes_identical(tmp_path):
    model = _model(seed=11)
    first = tmp_path / "a.stnc"
    second = tmp_path / "b.stnc"
    save_checkpoint(first, model, meta={"k": 1})
    loaded, meta = load_checkpoint(first)
    save_checkpoint(second, loaded, meta=meta)
    assert first.read_bytes() == second.read_bytes()


def test_loaded_model_evaluates_identically(tmp_path):
    model = _model(seed=7)
    u = np.random.default_rng(1).normal(size=(3, 3, 2))
    coords = np.random.default_rng(2).uniform(size=(4, 2))
    before = model.forward(u, coords).value
    path = tmp_path / "model.stnc"
    save_checkpoint(path, model)
    loaded, _ = load_checkpoint(path)
    after = loaded.forward(u, coords).value
    assert before.tobytes() == after.tobytes()


def test_stats_absent_round_trips_as_none(tmp_path):
    model = _model()
    model.norm_stats = None
    path = tmp_path / "bare.stnc"
    save_checkpoint(path, model)
    loaded, _ = load_checkpoint(path)
    assert loaded.norm_stats is None


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.stnc"
    path.write_bytes(b"JUNK" + bytes(64))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path):
    model = _model()
    path = tmp_path / "model.stnc"
    save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 99"):
        load_checkpoint(path)


def test_truncation_names_offset(tmp_path):
    model = _model()
    path = tmp_path / "model.stnc"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    cut = tmp_path / "cut.stnc"
    cut.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="byte"):
        load_checkpoint(cut)


def test_trailing_bytes_rejected(tmp_path):
    model = _model()
    path = tmp_path / "model.stnc"
    save_checkpoint(path, model)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_corrupt_config_json(tmp_path):
    path = tmp_path / "model.stnc"
    body = b"{not json"
    blob = (CHECKPOINT_MAGIC
            + (1).to_bytes(4, "little")
            + len(body).to_bytes(4, "little")
            + body)
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="JSON"):
        load_checkpoint(path)


def test_mutating_weights_changes_round_trip(tmp_path):
    # make sure the payload actually carries the weights
    model = _model(seed=3)
    path = tmp_path / "model.stnc"
    save_checkpoint(path, model)
    name = model.store.names()[0]
    model.store[name].value = model.store[name].value + 1.0
    path2 = tmp_path / "model2.stnc"
    save_checkpoint(path2, model)
    loaded1, _ = load_checkpoint(path)
    loaded2, _ = load_checkpoint(path2)
    npt.assert_allclose(loaded2.store[name].value,
                        loaded1.store[name].value + 1.0)
