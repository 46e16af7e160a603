"""
Checkpoint file:

    b"SMRC1"
    uint64 little-endian manifest length
    manifest (UTF-8 JSON: arch config, entries with name/kind/dtype/shape/offset/nbytes, train state, meta)
    payload  (raw little-endian arrays, one per entry, in manifest order)
    uint64 little-endian checksum of the payload (blake2b, 8 bytes)
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from smarc.config import ArchConfig
from smarc.model import SmarcModel, build_model
from smarc.optim import TrainState
from smarc.utils import checksum64

MAGIC = b"SMRC1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def _entries(model: SmarcModel, state: Optional[TrainState]) -> List[Tuple[str, str, np.ndarray]]:
    out = [(name, "param", p.data) for name, p in model.named_parameters().items()]
    out += [(name, "buffer", arr) for name, arr in model.buffers().items()]
    if state is not None:
        for name in sorted(state.m):
            out.append((name, "adam_m", state.m[name]))
            out.append((name, "adam_v", state.v[name]))
    return out


def save_checkpoint(
    model: SmarcModel,
    state: Optional[TrainState],
    path: str | Path,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write atomically (temp file + rename) so an interrupted save never clobbers the last good file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries, chunks, offset = [], [], 0
    for name, kind, arr in _entries(model, state):
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "kind": kind,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    manifest = {
        "format": 1,
        "arch": dataclasses.asdict(model.cfg),
        "frozen": sorted(model.frozen),
        "entries": entries,
        "state": state.scalars() if state is not None else None,
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_U64.pack(len(head)))
        f.write(head)
        f.write(payload)
        f.write(_U64.pack(checksum64(payload)))
    os.replace(tmp, path)
    return path


def _read(path: str | Path) -> Tuple[Dict[str, Any], bytes]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path.resolve()}")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: unknown magic {blob[:len(MAGIC)]!r} (expected {MAGIC!r})")
    pos = len(MAGIC)
    if len(blob) < pos + _U64.size * 2:
        raise CheckpointError(f"{path}: truncated header")
    (head_len,) = _U64.unpack_from(blob, pos)
    pos += _U64.size
    if pos + head_len + _U64.size > len(blob):
        raise CheckpointError(f"{path}: truncated manifest (declares {head_len} bytes)")
    try:
        manifest = json.loads(blob[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}")
    payload = blob[pos + head_len:-_U64.size]
    (stored,) = _U64.unpack_from(blob, len(blob) - _U64.size)
    if checksum64(payload) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    expected = sum(int(e["nbytes"]) for e in manifest.get("entries", []))
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest declares {expected}")
    return manifest, payload


def _array(entry: Dict[str, Any], payload: bytes) -> np.ndarray:
    dt = np.dtype(entry["dtype"])
    start, n = int(entry["offset"]), int(entry["nbytes"])
    arr = np.frombuffer(payload[start:start + n], dtype=dt).reshape(entry["shape"])
    return arr.astype(dt.newbyteorder("="), copy=True)


def arch_from_dict(d: Dict[str, Any]) -> ArchConfig:
    d = dict(d)
    for key in ("bottleneck_channels", "head_hidden"):
        if key in d:
            d[key] = tuple(d[key])
    return ArchConfig(**d)


def checkpoint_meta(path: str | Path) -> Dict[str, Any]:
    manifest, _ = _read(path)
    return dict(manifest.get("meta") or {})


def load_checkpoint(path: str | Path, model: Optional[SmarcModel] = None) -> Tuple[SmarcModel, TrainState]:
    """
    Restore parameters, buffers and optimizer state. Without `model`, a model
    is built from the stored ArchConfig. Every entry must match the model by
    name and shape.
    """
    manifest, payload = _read(path)
    if model is None:
        try:
            model = build_model(arch_from_dict(manifest["arch"]), seed=0)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: stored arch config is unusable: {e}")

    params = model.named_parameters()
    buffers = model.buffers()
    state = TrainState.from_scalars(manifest["state"]) if manifest.get("state") else TrainState()
    seen = set()

    for entry in manifest["entries"]:
        name, kind = entry["name"], entry["kind"]
        shape = tuple(entry["shape"])
        if kind in ("param", "adam_m", "adam_v"):
            target = params.get(name)
            if target is None:
                raise CheckpointError(f"{path}: entry '{name}' ({kind}) has no matching model parameter")
            target_shape = target.shape
        elif kind == "buffer":
            if name not in buffers:
                raise CheckpointError(f"{path}: entry '{name}' (buffer) has no matching model buffer")
            target_shape = buffers[name].shape
        else:
            raise CheckpointError(f"{path}: entry '{name}' has unknown kind '{kind}'")
        if shape != tuple(target_shape):
            raise CheckpointError(f"{path}: shape mismatch for '{name}' ({kind}): file {shape} vs model {tuple(target_shape)}")

        arr = _array(entry, payload)
        if kind == "param":
            params[name].assign(arr)
            seen.add(name)
        elif kind == "buffer":
            buffers[name][...] = arr
        elif kind == "adam_m":
            state.m[name] = arr
        else:
            state.v[name] = arr

    missing = [n for n in params if n not in seen]
    if missing:
        raise CheckpointError(f"{path}: model parameter '{missing[0]}' missing from checkpoint ({len(missing)} missing)")
    model.frozen = set(manifest.get("frozen", []))
    for name, p in params.items():
        p.requires_grad = name not in model.frozen
    return model, state
