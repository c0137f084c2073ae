"""Binary checkpoints.

Layout (little-endian)::

    b"SMMX" | u32 format version | u32 manifest length | manifest (UTF-8 JSON)
    | raw tensor payloads, back to back, at the offsets listed in the manifest

The manifest echoes the model config and carries the step counter, optimizer
hyper-parameters and the serialized mixing RNG state. Tensors are grouped as
``param`` (model weights, named per ``vit.parameter_shapes``), ``adam_m`` and
``adam_v``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .vit import ModelConfig, parameter_shapes

MAGIC = b"SMMX"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    optimizer: dict[str, Any] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": obj.dtype.str}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=np.dtype(obj["dtype"]))
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    return obj


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    groups = (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v))
    for group, tensors in groups:
        for name, arr in tensors.items():
            data = _le(np.asarray(arr)).tobytes()
            entries.append({"group": group, "name": name, "shape": list(np.shape(arr)),
                            "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
                            "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    manifest = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config.to_dict(),
        "step": int(ckpt.step),
        "optimizer": _jsonable(ckpt.optimizer),
        "rng_state": _jsonable(ckpt.rng_state),
        "extra": _jsonable(ckpt.extra),
        "tensors": entries,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, ckpt.format_version, len(text)))
        f.write(text)
        for b in blobs:
            f.write(b)
    tmp.replace(path)
    return path


def read_manifest(path: str | Path) -> tuple[dict, int]:
    """Parsed manifest and the byte offset where payloads start."""
    with open(path, "rb") as f:
        pre = f.read(_PREAMBLE.size)
        if len(pre) < _PREAMBLE.size or pre[:4] != MAGIC:
            raise CheckpointMagicError(f"{path}: not a checkpoint (magic {pre[:4]!r})")
        _, version, length = _PREAMBLE.unpack(pre)
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        text = f.read(length)
    if len(text) < length:
        raise CheckpointError(f"{path}: manifest truncated")
    return json.loads(text.decode("utf-8")), _PREAMBLE.size + length


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read and validate a checkpoint; shapes are checked against its config
    (and against ``expect`` when given)."""
    manifest, base = read_manifest(path)
    cfg = ModelConfig(**manifest["model_config"])
    if expect is not None and expect != cfg:
        raise CheckpointShapeError(f"{path}: checkpoint config {cfg} differs from expected {expect}")
    raw = Path(path).read_bytes()
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: payload for {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    expected = parameter_shapes(cfg)
    params = groups["param"]
    if list(params) != list(expected):
        raise CheckpointShapeError(
            f"{path}: parameter names differ from config (missing {sorted(set(expected) - set(params))[:3]},"
            f" unexpected {sorted(set(params) - set(expected))[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {params[name].shape}, config needs {shape}")
    return Checkpoint(cfg, params, manifest["step"], _from_jsonable(manifest["optimizer"]),
                      groups["adam_m"], groups["adam_v"], _from_jsonable(manifest["rng_state"]),
                      _from_jsonable(manifest["extra"]), manifest["format_version"])
