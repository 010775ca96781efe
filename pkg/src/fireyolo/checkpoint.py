"""Binary tensor checkpoints with a JSON sidecar describing the model.

Layout (all integers little-endian)::

    magic   b"FYTC"
    version u32
    count   u64
    entry*  name_len u32 | name utf-8 | rank u32 | extents u64 * rank | float32 * prod(extents)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .detector import DetectorModel, ModelConfig

MAGIC = b"FYTC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict) -> None:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(model: DetectorModel, path) -> None:
    write_tensors(path, model.state_dict())
    meta = {"config": model.config.to_dict(), "seed": model.seed}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_config(path) -> ModelConfig:
    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"{path}: missing config sidecar {side.name}")
    return ModelConfig.from_dict(json.loads(side.read_text())["config"])


def load_model(path) -> DetectorModel:
    side = sidecar_path(path)
    config = load_config(path)
    seed = json.loads(side.read_text()).get("seed", 0)
    model = DetectorModel(config, seed)
    try:
        model.load_state_dict(read_tensors(path))
    except KeyError as exc:
        raise CheckpointError(f"{path}: checkpoint does not match its config: {exc}") from exc
    return model
