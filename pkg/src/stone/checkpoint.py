"""Binary model checkpoints.

Layout (little-endian throughout):

    magic       4 bytes   b"STNC"
    version     u32       1
    config_len  u32
    config      UTF-8 JSON, sorted keys: {"branch": {...}, "trunk": {...},
                "meta": {...}}
    n_params    u32
    per parameter, in creation order:
        name_len u32 | name UTF-8 | rank u32 | dims u64 x rank |
        payload f64 (C order)
    stats_len   u32
    stats       UTF-8 JSON normalization stats, or the 4 bytes "null"
                for a model that has none

Everything a forecast needs rides along: architecture, weights, and the
normalization statistics of the training data. Malformed files raise
FormatError naming the byte offset.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .autodiff import DTYPE
from .branches import BranchConfig
from .data import NormStats
from .errors import FormatError
from .operator import build_model
from .trunk import TrunkConfig

CHECKPOINT_MAGIC = b"STNC"
CHECKPOINT_VERSION = 1


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model, meta=None):
    """Serialize a model (and its stats) to ``path``."""
    config = {
        "branch": dataclasses.asdict(model.branch_cfg),
        "trunk": dataclasses.asdict(model.trunk_cfg),
        "meta": meta or {},
    }
    config_bytes = _dump_json(config)
    stats = model.norm_stats.to_dict() if model.norm_stats is not None else None
    stats_bytes = _dump_json(stats)

    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        np.array([CHECKPOINT_VERSION, len(config_bytes)],
                 dtype="<u4").tofile(handle)
        handle.write(config_bytes)
        np.array([len(model.store)], dtype="<u4").tofile(handle)
        for name, node in model.store.items():
            encoded = name.encode("utf-8")
            np.array([len(encoded)], dtype="<u4").tofile(handle)
            handle.write(encoded)
            np.array([node.value.ndim], dtype="<u4").tofile(handle)
            np.array(node.value.shape, dtype="<u8").tofile(handle)
            np.ascontiguousarray(node.value, dtype="<f8").tofile(handle)
        np.array([len(stats_bytes)], dtype="<u4").tofile(handle)
        handle.write(stats_bytes)


class _Cursor:
    def __init__(self, path, raw):
        self.path = path
        self.raw = raw
        self.offset = 0

    def take(self, count, what):
        if self.offset + count > len(self.raw):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte "
                f"{self.offset} (need {count} bytes, file has "
                f"{len(self.raw) - self.offset})"
            )
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what):
        return int(np.frombuffer(self.take(4, what), dtype="<u4")[0])

    def json(self, what):
        length = self.u32(f"{what} length")
        blob = self.take(length, what)
        try:
            return json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(
                f"{self.path}: invalid JSON for {what} ending at byte "
                f"{self.offset}: {exc}"
            ) from None


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, meta)."""
    with open(path, "rb") as handle:
        raw = handle.read()
    cur = _Cursor(path, raw)

    magic = cur.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(
            f"{path}: bad magic {magic!r} at byte 0, expected "
            f"{CHECKPOINT_MAGIC!r}"
        )
    version = cur.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {version} at byte 4, "
            f"expected {CHECKPOINT_VERSION}"
        )
    config = cur.json("config")
    for key in ("branch", "trunk"):
        if key not in config:
            raise FormatError(f"{path}: config block lacks '{key}'")
    try:
        branch_cfg = BranchConfig(**config["branch"])
        trunk_cfg = TrunkConfig(**config["trunk"])
    except TypeError as exc:
        raise FormatError(f"{path}: malformed config block: {exc}") from None

    n_params = cur.u32("parameter count")
    arrays = {}
    for index in range(n_params):
        name_len = cur.u32(f"parameter {index} name length")
        name = cur.take(name_len, f"parameter {index} name").decode("utf-8")
        rank = cur.u32(f"parameter '{name}' rank")
        if rank > 4:
            raise FormatError(
                f"{path}: parameter '{name}' has rank {rank} (> 4) at byte "
                f"{cur.offset - 4}"
            )
        dims = np.frombuffer(
            cur.take(8 * rank, f"parameter '{name}' dims"), dtype="<u8"
        ).astype(int)
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(
            cur.take(8 * count, f"parameter '{name}' payload"), dtype="<f8"
        )
        arrays[name] = payload.reshape(tuple(dims)).astype(DTYPE)

    stats_obj = cur.json("normalization stats")
    if cur.offset != len(raw):
        raise FormatError(
            f"{path}: {len(raw) - cur.offset} trailing bytes after byte "
            f"{cur.offset}"
        )

    model = build_model(branch_cfg, trunk_cfg, seed=0)
    try:
        model.store.load_arrays(arrays)
    except Exception as exc:
        raise FormatError(f"{path}: parameter mismatch: {exc}") from None
    extra = set(arrays) - set(model.store.names())
    if extra:
        raise FormatError(
            f"{path}: checkpoint carries unknown parameters {sorted(extra)}"
        )
    if stats_obj is not None:
        model.norm_stats = NormStats.from_dict(stats_obj)
    return model, config.get("meta", {})
