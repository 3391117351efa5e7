"""Checkpoint persistence.

Layout (all text ASCII, payload binary):

    ABDNMT1\n
    key=value\n ...            model configuration and bookkeeping
    \n
    name rows cols offset\n ...  parameter manifest, offsets into the payload
    \n
    raw little-endian IEEE-754 32-bit values, manifest order

The manifest order is the ParamStore iteration order, so a save/load/save
round trip is byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as tz
from .errors import DataError
from .model import ModelConfig, ModelParams, param_shapes, wire_views
from .tensor import ParamStore

MAGIC = "ABDNMT1"

_CONFIG_FIELDS = [
    ("mode", str),
    ("src_vocab_size", int),
    ("tgt_vocab_size", int),
    ("embed_dim", int),
    ("hidden_dim", int),
    ("attn_dim", int),
    ("readout_dim", int),
    ("lam", float),
    ("dropout", float),
    ("detach_backward_trace", bool),
    ("share_target_embeddings", bool),
    ("trace_len_factor", int),
    ("trace_len_extra", int),
    ("init_std", float),
]


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, kind):
    if text == "none":
        return None
    if kind is bool:
        return text == "true"
    return kind(text)


def save_checkpoint(path, params: ModelParams) -> Path:
    path = Path(path)
    meta = [f"{name}={_fmt(getattr(params.config, name))}" for name, _ in _CONFIG_FIELDS]
    meta.append(f"precision={tz.get_precision()}")
    meta.append(f"param_count={params.store.total_entries()}")
    manifest, blobs = [], []
    offset = 0
    for p in params.store:
        manifest.append(f"{p.name} {p.value.rows} {p.value.cols} {offset}")
        raw = np.ascontiguousarray(p.value.data, dtype="<f4")
        blobs.append(raw.tobytes())
        offset += raw.nbytes
    header = MAGIC + "\n" + "\n".join(meta) + "\n\n" + "\n".join(manifest) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> ModelParams:
    """Rebuild a model from a checkpoint, in the active precision."""
    path = Path(path)
    raw = path.read_bytes()
    first = raw.find(b"\n")
    if first < 0 or raw[:first].decode("ascii", "replace") != MAGIC:
        raise DataError(f"{path}: not a checkpoint (missing {MAGIC} header)")
    meta_end = raw.find(b"\n\n", first)
    manifest_end = raw.find(b"\n\n", meta_end + 2)
    if meta_end < 0 or manifest_end < 0:
        raise DataError(f"{path}: truncated checkpoint header")
    meta_lines = raw[first + 1:meta_end].decode("ascii").split("\n")
    manifest_lines = raw[meta_end + 2:manifest_end].decode("ascii").split("\n")
    payload = raw[manifest_end + 2:]

    meta = {}
    for line in meta_lines:
        key, _, value = line.partition("=")
        if not _:
            raise DataError(f"{path}: bad metadata line {line!r}")
        meta[key] = value
    try:
        config = ModelConfig(**{name: _parse(meta[name], kind) for name, kind in _CONFIG_FIELDS})
    except KeyError as e:
        raise DataError(f"{path}: metadata missing key {e}")

    specs = {s.name: s for s in param_shapes(config)}
    if len(manifest_lines) != len(specs):
        raise DataError(
            f"{path}: manifest has {len(manifest_lines)} parameters, configuration declares {len(specs)}")
    store = ParamStore()
    dtype = tz.current_dtype()
    for line in manifest_lines:
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}: bad manifest line {line!r}")
        name, rows, cols, offset = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
        spec = specs.get(name)
        if spec is None or (spec.rows, spec.cols) != (rows, cols):
            raise DataError(f"{path}: parameter {name!r} ({rows}x{cols}) does not match the configuration")
        count = rows * cols
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        store.add(name, values.astype(dtype).reshape(rows, cols), spec.group)
    return wire_views(ModelParams(config, store))
