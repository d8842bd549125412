"""Binary checkpoint format.

Layout::

    b"FOMO0D1\\n"                       magic (8 bytes)
    <uint32 little-endian>             header length in bytes
    <header JSON, UTF-8>               configs, step, loss, array manifest
    <raw little-endian array payloads> in manifest order, contiguous

Each manifest entry carries ``name``, ``shape``, ``dtype``, ``offset`` and
``nbytes``; offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, param_shapes

MAGIC = b"FOMO0D1\n"
FORMAT_VERSION = 1
_OPT_M = "adam.m."
_OPT_V = "adam.v."


class CheckpointError(ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass(eq=False)
class Checkpoint:
    model_config: ModelConfig
    train_config: dict
    params: dict[str, np.ndarray]
    step: int = 0
    loss: float = float("nan")
    optimizer: dict | None = None  # {"t": int, "m": {...}, "v": {...}}
    extra: dict = field(default_factory=dict)


def _arrays(cp: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = list(cp.params.items())
    if cp.optimizer is not None:
        items += [(_OPT_M + k, v) for k, v in cp.optimizer["m"].items()]
        items += [(_OPT_V + k, v) for k, v in cp.optimizer["v"].items()]
    return items


def to_bytes(cp: Checkpoint) -> bytes:
    manifest = []
    payload = []
    offset = 0
    for name, arr in _arrays(cp):
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                         "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "model_config": cp.model_config.to_dict(),
        "precision": cp.model_config.precision,
        "train_config": cp.train_config,
        "step": int(cp.step),
        "loss": None if np.isnan(cp.loss) else float(cp.loss),
        "optimizer_t": None if cp.optimizer is None else int(cp.optimizer["t"]),
        "extra": cp.extra,
        "arrays": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(payload)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 4:
        raise TruncatedCheckpointError("file too short to hold a checkpoint header")
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptHeaderError("bad magic bytes; not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise TruncatedCheckpointError("header extends past end of file")
    try:
        header = json.loads(blob[start: start + hlen].decode("utf-8"))
        version = header["version"]
        mcfg = ModelConfig(**header["model_config"])
        manifest = header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"unreadable checkpoint header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise CorruptHeaderError(f"unsupported checkpoint version {version}")

    expected = param_shapes(mcfg)
    payload = memoryview(blob)[start + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        try:
            name, shape, dtype = entry["name"], tuple(entry["shape"]), np.dtype(entry["dtype"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptHeaderError(f"bad manifest entry {entry!r}") from exc
        if int(np.prod(shape)) * dtype.itemsize != nbytes:
            raise ShapeMismatchError(f"{name}: shape {shape} does not match {nbytes} bytes")
        base = name[len(_OPT_M):] if name.startswith((_OPT_M, _OPT_V)) else name
        if base not in expected or expected[base] != shape:
            raise ShapeMismatchError(
                f"{name}: manifest shape {shape} inconsistent with model config "
                f"(expected {expected.get(base)})")
        if offset + nbytes > len(payload):
            raise TruncatedCheckpointError(f"payload for {name} is truncated")
        arrays[name] = np.frombuffer(payload[offset: offset + nbytes],
                                     dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    params = {k: v for k, v in arrays.items() if not k.startswith((_OPT_M, _OPT_V))}
    missing = set(expected) - set(params)
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks arrays: {sorted(missing)[:5]}")
    optimizer = None
    if header.get("optimizer_t") is not None:
        optimizer = {
            "t": int(header["optimizer_t"]),
            "m": {k[len(_OPT_M):]: v for k, v in arrays.items() if k.startswith(_OPT_M)},
            "v": {k[len(_OPT_V):]: v for k, v in arrays.items() if k.startswith(_OPT_V)},
        }
    loss = header.get("loss")
    return Checkpoint(mcfg, header.get("train_config") or {},
                      {k: params[k] for k in expected}, int(header.get("step", 0)),
                      float("nan") if loss is None else float(loss), optimizer,
                      header.get("extra") or {})


def save_checkpoint(cp: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(cp))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
