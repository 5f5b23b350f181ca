"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"FGDF"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u8 dtype, u8 rank, rank x u32, data }

dtype codes: 0 float32, 1 float64, 2 raw bytes (u8), 3 int64.  Metadata
records are JSON documents stored as u8 tensors under ``__meta__/...``.
Optimizer moments live under ``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FGDF"
VERSION = 1
META_CONFIG = "__meta__/model_config"
META_TRAIN = "__meta__/train_state"

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i8"): 3}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)

    def meta(self, key: str):
        raw = self.tensors.get(key)
        return None if raw is None else json.loads(raw.tobytes().decode("utf-8"))

    def set_meta(self, key: str, value) -> None:
        self.tensors[key] = np.frombuffer(json.dumps(value, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def write(path, ckpt: Checkpoint) -> None:
    """Serialize atomically: a crash mid-write leaves any previous file intact."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)) + key)
        chunks.append(struct.pack(f"<BB{arr.ndim}I", _CODES[dt], arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}: {what} at byte {pos} needs {n} bytes")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "name length"))
        name = take(n, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"header of {name!r}"))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(size, f"data of {name!r}"), dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor in {path}")
    return Checkpoint(tensors)


def from_model(model, optimizer=None, train_state: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint()
    ckpt.set_meta(META_CONFIG, model.config.to_dict())
    for name, p in model.named_parameters():
        ckpt.tensors[name] = p.data
    if optimizer is not None:
        for name in optimizer.m:
            ckpt.tensors[f"adam.m/{name}"] = optimizer.m[name]
            ckpt.tensors[f"adam.v/{name}"] = optimizer.v[name]
    if train_state is not None:
        ckpt.set_meta(META_TRAIN, train_state)
    return ckpt


def save(path, model, optimizer=None, train_state: dict | None = None) -> None:
    write(path, from_model(model, optimizer, train_state))


def check_compatible(model, ckpt: Checkpoint) -> None:
    """Every model parameter present with matching shape and dtype, nothing extra."""
    expected = dict(model.named_parameters())
    for name, p in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.shape}")
        if arr.dtype != p.dtype:
            raise CheckpointError(f"dtype mismatch for {name!r}: checkpoint {arr.dtype}, model {p.dtype}")
    for name in ckpt.tensors:
        if name.startswith(("__meta__/", "adam.m/", "adam.v/")):
            continue
        if name not in expected:
            raise CheckpointError(f"checkpoint has unknown tensor {name!r}")


def load_into(model, ckpt: Checkpoint, optimizer=None) -> None:
    """Assign weights (and optimizer moments); validates everything before writing."""
    check_compatible(model, ckpt)
    if optimizer is not None:
        for name in optimizer.m:
            for kind in ("m", "v"):
                key = f"adam.{kind}/{name}"
                if key not in ckpt.tensors:
                    raise CheckpointError(f"checkpoint lacks optimizer state {key!r}")
                if ckpt.tensors[key].shape != optimizer.m[name].shape:
                    raise CheckpointError(f"shape mismatch for {key!r}")
    for name, p in model.named_parameters():
        p.data[...] = ckpt.tensors[name]
    if optimizer is not None:
        for name in optimizer.m:
            optimizer.m[name][...] = ckpt.tensors[f"adam.m/{name}"]
            optimizer.v[name][...] = ckpt.tensors[f"adam.v/{name}"]


def load_model(path):
    """Rebuild a model from the config stored in the file and load its weights."""
    from .model import FGDFPN, ModelConfig

    ckpt = read(path)
    cfg = ckpt.meta(META_CONFIG)
    if cfg is None:
        raise CheckpointError(f"{path} has no {META_CONFIG} record")
    try:
        config = ModelConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config in {path}: {exc}") from exc
    model = FGDFPN(config)
    load_into(model, ckpt)
    return model, ckpt
