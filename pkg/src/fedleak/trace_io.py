"""Deterministic binary container for training traces.

A trace file is a magic string, a length-prefixed JSON header (config,
metadata, and an array index), followed by the raw little-endian bytes of
each array in index order.  Identical traces always serialize to identical
bytes, which zip-based formats cannot promise.  Intermediate client
parameters from oracle runs are an in-memory debugging aid and are not
serialized.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .federated import OracleLog, TrainingConfig, TrainingTrace
from .model import ModelParams

__all__ = ["save_trace", "load_trace", "TraceFormatError"]

MAGIC = b"FLTRACE1"
FORMAT_VERSION = 1


class TraceFormatError(ValueError):
    """The file is not a readable trace container."""


def _ragged_pack(nested: list[list[np.ndarray]]):
    """Flatten a [t][h] list of id arrays into values plus offsets."""
    chunks, offsets, pos = [], [0], 0
    for per_round in nested:
        for ids in per_round:
            chunks.append(np.asarray(ids, dtype=np.int64))
            pos += len(ids)
            offsets.append(pos)
    values = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return values, np.array(offsets, dtype=np.int64)


def _ragged_unpack(values: np.ndarray, offsets: np.ndarray, t_max: int, H: int):
    out = []
    idx = 0
    for _ in range(t_max):
        row = []
        for _ in range(H):
            row.append(values[offsets[idx]: offsets[idx + 1]].copy())
            idx += 1
        out.append(row)
    return out


def save_trace(path, trace: TrainingTrace) -> None:
    cfg = trace.config
    flat = np.stack([p.flatten() for p in trace.iterates])
    arrays: dict[str, np.ndarray] = {"iterates": flat}
    if trace.oracle_log is not None:
        log = trace.oracle_log
        arrays["oracle/batch_ids"] = log.batch_ids
        arrays["oracle/mask"] = log.activation_mask.astype(np.uint8)
        a_vals, a_offs = _ragged_pack(log.round_sets)
        s_vals, s_offs = _ragged_pack(log.round_start_active)
        arrays["oracle/set_values"] = a_vals
        arrays["oracle/set_offsets"] = a_offs
        arrays["oracle/start_values"] = s_vals
        arrays["oracle/start_offsets"] = s_offs

    index = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arrays[name] = arr
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "metadata": trace.metadata,
        "n_iterates": len(trace.iterates),
        "has_oracle": trace.oracle_log is not None,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for name, _ in ((e["name"], None) for e in index):
            f.write(arrays[name].tobytes())


def load_trace(path) -> TrainingTrace:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise TraceFormatError(f"{path} is not a trace file")
        blob_len = int.from_bytes(f.read(8), "little")
        try:
            header = json.loads(f.read(blob_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TraceFormatError(f"{path}: unreadable header") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise TraceFormatError(
                f"{path}: unsupported format version {header.get('format_version')}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise TraceFormatError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()

    cfg = TrainingConfig.from_dict(header["config"])
    iterates = [
        ModelParams.unflatten(row, cfg.input_dim, cfg.hidden_neurons,
                              cfg.head_widths, cfg.n_outputs)
        for row in arrays["iterates"]
    ]
    log = None
    if header["has_oracle"]:
        t_logged = arrays["oracle/batch_ids"].shape[0]
        log = OracleLog(
            batch_ids=arrays["oracle/batch_ids"],
            activation_mask=arrays["oracle/mask"].astype(bool),
            round_sets=_ragged_unpack(arrays["oracle/set_values"],
                                      arrays["oracle/set_offsets"],
                                      t_logged, cfg.hidden_neurons),
            round_start_active=_ragged_unpack(arrays["oracle/start_values"],
                                              arrays["oracle/start_offsets"],
                                              t_logged, cfg.hidden_neurons),
        )
    return TrainingTrace(cfg, iterates, log, metadata=header["metadata"])
