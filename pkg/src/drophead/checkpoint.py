"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DHCK" | version u32 | record count u32
    per record: name length u32 | UTF-8 name | dtype tag u8 (0=f32, 1=f64)
                | rank u8 | extents u64 * rank | row-major payload

The model configuration lives in a JSON sidecar next to the binary file
(``<stem>.json``).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Placement, TransformerModel
from .tensor import Tensor

MAGIC = b"DHCK"
FORMAT_VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def write_tensors(path, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        try:
            tag = _TAGS[arr.dtype]
        except KeyError:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}") from None
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            tag, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dt = _DTYPES[tag]
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype=dt, count=size, offset=off).reshape(shape)
            off += size * dt.itemsize
            out[name] = arr.astype(dt.newbyteorder("="))
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["placement"] = Placement(**d.get("placement", {}))
    return ModelConfig(**d)


def save_checkpoint(model: TransformerModel, path) -> Path:
    path = Path(path)
    write_tensors(path, {k: p.data for k, p in model.params.items()})
    sidecar_path(path).write_text(json.dumps(config_to_dict(model.config), indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> TransformerModel:
    cfg = config_from_dict(json.loads(sidecar_path(path).read_text()))
    arrays = read_tensors(path)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    for k, p in params.items():
        if p.dtype != cfg.np_dtype:
            raise CheckpointError(f"{k}: dtype {p.dtype} does not match config dtype {cfg.dtype}")
    return TransformerModel(cfg, params)
