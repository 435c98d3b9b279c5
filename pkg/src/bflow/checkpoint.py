"""``.bflw`` checkpoints.

Layout::

    b"BFLW1\\n"
    u64 little-endian manifest length
    UTF-8 JSON manifest (sorted keys, compact separators)
    little-endian f64 payload, arrays concatenated in directory order

The manifest carries the model configuration, the channel-first input shape,
the iteration counter, the actnorm-initialized flag and a directory of
``{name, shape, offset, count}`` entries (offsets in bytes from the start of
the payload). Parameters come first, then frozen buffers, then extras such
as the dataset permutation. Writing is fully deterministic, so a
save/load/save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptCheckpointError, ShapeMismatchError
from .flow import FlowModel, build_model

MAGIC = b"BFLW1\n"
_HEADER = len(MAGIC) + 8


@dataclass
class Checkpoint:
    model: FlowModel
    iteration: int = 0
    run_config: dict | None = None
    extras: dict = field(default_factory=dict)


def _encode_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def container_bytes(header: dict, arrays) -> bytes:
    """Serialize ``header`` plus a directory of named f64 arrays (an ordered mapping)."""
    packed = [(name, np.ascontiguousarray(arr, dtype="<f8")) for name, arr in arrays.items()]
    directory, offset = [], 0
    for name, arr in packed:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size * 8
    blob = _encode_manifest({**header, "directory": directory})
    parts = [MAGIC, struct.pack("<Q", len(blob)), blob]
    parts.extend(arr.tobytes() for _, arr in packed)
    return b"".join(parts)


def checkpoint_bytes(model: FlowModel, iteration: int = 0, run_config=None, extras=None) -> bytes:
    arrays = {**model.parameters(), **model.buffers(), **(extras or {})}
    header = {
        "format": 1,
        "input_shape": list(model.input_shape),
        "model_config": model.config,
        "run_config": run_config,
        "iter": int(iteration),
        "initialized": bool(model.initialized),
    }
    return container_bytes(header, arrays)


def checkpoint_save(model: FlowModel, path, iteration: int = 0, run_config=None, extras=None) -> None:
    data = checkpoint_bytes(model, iteration, run_config, extras)
    with open(path, "wb") as fh:
        fh.write(data)


def read_container(path) -> tuple[dict, dict]:
    """``(manifest, arrays)`` of any file in the ``BFLW1`` container format."""
    with open(path, "rb") as fh:
        return _parse(fh.read(), required=())


def _parse(data: bytes, required=("input_shape", "model_config", "iter", "initialized")):
    if len(data) < _HEADER or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    (length,) = struct.unpack("<Q", data[len(MAGIC) : _HEADER])
    if _HEADER + length > len(data):
        raise CorruptCheckpointError("manifest length exceeds file size")
    try:
        manifest = json.loads(data[_HEADER : _HEADER + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable manifest: {exc}") from None
    if not isinstance(manifest, dict) or any(k not in manifest for k in ("directory",) + tuple(required)):
        raise CorruptCheckpointError("manifest is missing required keys")
    payload = memoryview(data)[_HEADER + length :]
    arrays, expect, seen = {}, 0, set()
    for entry in manifest["directory"]:
        try:
            name, shape, off, count = entry["name"], tuple(entry["shape"]), entry["offset"], entry["count"]
        except (KeyError, TypeError):
            raise CorruptCheckpointError("malformed directory entry") from None
        if name in seen:
            raise CorruptCheckpointError(f"duplicate directory entry {name}")
        seen.add(name)
        if off != expect:
            raise CorruptCheckpointError(f"directory offset gap at {name}")
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CorruptCheckpointError(f"element count does not match shape for {name}")
        if off + 8 * count > len(payload):
            raise CorruptCheckpointError("payload truncated")
        arrays[name] = np.frombuffer(payload[off : off + 8 * count], dtype="<f8").reshape(shape).astype(np.float64)
        expect = off + 8 * count
    if expect != len(payload):
        raise CorruptCheckpointError("payload size does not match directory")
    return manifest, arrays


def _fill(model: FlowModel, arrays: dict, mismatch_exc) -> None:
    targets = {**model.parameters(), **model.buffers()}
    missing = [k for k in targets if k not in arrays]
    if missing:
        raise mismatch_exc(f"checkpoint lacks {missing[0]}")
    for k, dst in targets.items():
        if arrays[k].shape != dst.shape:
            raise mismatch_exc(f"{k}: checkpoint shape {arrays[k].shape}, model shape {dst.shape}")
    for k, dst in targets.items():
        dst[...] = arrays[k]


def checkpoint_read(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    manifest, arrays = _parse(data)
    try:
        model = build_model(manifest["model_config"], manifest["input_shape"])
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptCheckpointError(f"cannot rebuild model: {exc}") from None
    _fill(model, arrays, CorruptCheckpointError)
    if manifest["initialized"]:
        model.mark_initialized()
    known = set(model.parameters()) | set(model.buffers())
    extras = {k: v for k, v in arrays.items() if k not in known}
    return Checkpoint(model, int(manifest["iter"]), manifest.get("run_config"), extras)


def checkpoint_load(path) -> FlowModel:
    return checkpoint_read(path).model


def checkpoint_load_into(model: FlowModel, path) -> FlowModel:
    """Overwrite ``model``'s tensors from ``path``; shapes must agree exactly."""
    with open(path, "rb") as fh:
        manifest, arrays = _parse(fh.read())
    if tuple(manifest["input_shape"]) != model.input_shape:
        raise ShapeMismatchError(
            f"checkpoint input shape {tuple(manifest['input_shape'])} vs model {model.input_shape}"
        )
    _fill(model, arrays, ShapeMismatchError)
    if manifest["initialized"]:
        model.mark_initialized()
    return model
